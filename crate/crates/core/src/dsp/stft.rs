use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Short-time Fourier transform parameters. The window is a periodic Hann of
/// length `n_fft` and frames are centered with reflect padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StftConfig {
    pub n_fft: usize,
    pub hop: usize,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self { n_fft: 512, hop: 128 }
    }
}

impl StftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_fft < 4 || self.n_fft % 2 != 0 {
            return Err(Error::InvalidArgument(format!(
                "n_fft must be even and at least 4, got {}",
                self.n_fft
            )));
        }
        if self.hop == 0 || self.n_fft % self.hop != 0 || self.n_fft / self.hop < 2 {
            return Err(Error::InvalidArgument(format!(
                "hop {} must divide n_fft {} with at least 2x overlap",
                self.hop, self.n_fft
            )));
        }
        Ok(())
    }

    /// Number of frequency bins, `n_fft / 2 + 1`.
    pub fn bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    pub fn frames(&self, signal_len: usize) -> usize {
        1 + signal_len / self.hop
    }

    /// The config whose STFT has `bins` frequency bins at 75 % overlap, or the
    /// nearest divisor hop when `n_fft` is not a multiple of 4.
    pub fn for_bins(bins: usize) -> Result<Self> {
        if bins < 3 {
            return Err(Error::InvalidArgument(format!("need at least 3 bins, got {bins}")));
        }
        let n_fft = 2 * (bins - 1);
        let hop = (2..=n_fft / 2)
            .rev()
            .filter(|h| n_fft % h == 0 && n_fft / h >= 4)
            .next()
            .unwrap_or(n_fft / 2);
        let cfg = Self { n_fft, hop };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn window(&self) -> Vec<f64> {
        hann_periodic(self.n_fft)
    }
}

pub fn hann_periodic(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

/// Complex STFT, stored bin-major (`bins × frames`).
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexSpectrogram {
    pub bins: usize,
    pub frames: usize,
    pub data: Vec<Complex64>,
    /// Length of the analysed signal, needed to invert.
    pub signal_len: usize,
}

/// Magnitude (or any real) time-frequency grid, bin-major.
#[derive(Clone, Debug, PartialEq)]
pub struct MagnitudeSpectrogram {
    pub bins: usize,
    pub frames: usize,
    pub data: Vec<f64>,
    pub signal_len: usize,
}

impl ComplexSpectrogram {
    pub fn zeros(bins: usize, frames: usize, signal_len: usize) -> Self {
        Self {
            bins,
            frames,
            data: vec![Complex64::new(0.0, 0.0); bins * frames],
            signal_len,
        }
    }

    pub fn at(&self, bin: usize, frame: usize) -> Complex64 {
        self.data[bin * self.frames + frame]
    }

    pub fn magnitude(&self) -> MagnitudeSpectrogram {
        MagnitudeSpectrogram {
            bins: self.bins,
            frames: self.frames,
            data: self.data.iter().map(|c| c.norm()).collect(),
            signal_len: self.signal_len,
        }
    }

    pub fn phase(&self) -> Vec<f64> {
        self.data.iter().map(|c| c.arg()).collect()
    }
}

impl MagnitudeSpectrogram {
    pub fn new(bins: usize, frames: usize, data: Vec<f64>, signal_len: usize) -> Result<Self> {
        if data.len() != bins * frames {
            return Err(Error::shape("spectrogram", &[bins, frames], &[data.len()]));
        }
        Ok(Self {
            bins,
            frames,
            data,
            signal_len,
        })
    }

    pub fn at(&self, bin: usize, frame: usize) -> f64 {
        self.data[bin * self.frames + frame]
    }

    pub fn check_nonnegative(&self) -> Result<()> {
        if let Some(v) = self.data.iter().find(|v| !(**v >= 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "magnitudes must be nonnegative and finite, found {v}"
            )));
        }
        Ok(())
    }

    /// Combines with a phase grid into a complex spectrogram.
    pub fn with_phase(&self, phase: &[f64]) -> ComplexSpectrogram {
        ComplexSpectrogram {
            bins: self.bins,
            frames: self.frames,
            data: self
                .data
                .iter()
                .zip(phase)
                .map(|(&m, &p)| Complex64::from_polar(m, p))
                .collect(),
            signal_len: self.signal_len,
        }
    }
}

/// Reusable forward/inverse transform for one configuration.
pub struct Stft {
    cfg: StftConfig,
    window: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl Stft {
    pub fn new(cfg: StftConfig) -> Result<Self> {
        cfg.validate()?;
        let mut planner = FftPlanner::new();
        Ok(Self {
            window: cfg.window(),
            forward: planner.plan_fft_forward(cfg.n_fft),
            inverse: planner.plan_fft_inverse(cfg.n_fft),
            cfg,
        })
    }

    pub fn config(&self) -> StftConfig {
        self.cfg
    }

    fn pad(&self) -> usize {
        self.cfg.n_fft / 2
    }

    /// Index into the original signal for position `i` of the reflect-padded
    /// signal.
    fn source_index(&self, i: usize, len: usize) -> usize {
        let pad = self.pad();
        if i < pad {
            pad - i
        } else if i - pad < len {
            i - pad
        } else {
            2 * (len - 1) - (i - pad)
        }
    }

    pub fn forward(&self, x: &[f64]) -> Result<ComplexSpectrogram> {
        let n = self.cfg.n_fft;
        if x.len() < n {
            return Err(Error::InvalidArgument(format!(
                "signal of {} samples is shorter than n_fft = {n}",
                x.len()
            )));
        }
        let (bins, frames) = (self.cfg.bins(), self.cfg.frames(x.len()));
        let mut spec = ComplexSpectrogram::zeros(bins, frames, x.len());
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        let mut scratch = vec![Complex64::new(0.0, 0.0); self.forward.get_inplace_scratch_len()];
        for m in 0..frames {
            let start = m * self.cfg.hop;
            for (j, b) in buf.iter_mut().enumerate() {
                *b = Complex64::new(x[self.source_index(start + j, x.len())] * self.window[j], 0.0);
            }
            self.forward.process_with_scratch(&mut buf, &mut scratch);
            for k in 0..bins {
                spec.data[k * frames + m] = buf[k];
            }
        }
        Ok(spec)
    }

    /// Least-squares inverse of [`Stft::forward`]: windowed overlap-add
    /// normalized by the summed squared window, with the reflect-padded
    /// margins folded back onto the samples they mirror. For any consistent
    /// spectrogram this is the exact inverse.
    pub fn inverse(&self, spec: &ComplexSpectrogram) -> Result<Vec<f64>> {
        let n = self.cfg.n_fft;
        let len = spec.signal_len;
        if spec.bins != self.cfg.bins() || spec.frames != self.cfg.frames(len) || len < n {
            return Err(Error::InvalidArgument(format!(
                "spectrogram {}x{} for {len} samples does not match n_fft {} / hop {}",
                spec.bins, spec.frames, n, self.cfg.hop
            )));
        }
        let mut num = vec![0.0; len];
        let mut den = vec![0.0; len];
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        let mut scratch = vec![Complex64::new(0.0, 0.0); self.inverse.get_inplace_scratch_len()];
        let half = n / 2;
        let scale = 1.0 / n as f64;
        for m in 0..spec.frames {
            for k in 0..=half {
                buf[k] = spec.data[k * spec.frames + m];
            }
            for k in 1..half {
                buf[n - k] = buf[k].conj();
            }
            self.inverse.process_with_scratch(&mut buf, &mut scratch);
            let start = m * self.cfg.hop;
            for j in 0..n {
                let w = self.window[j];
                let src = self.source_index(start + j, len);
                num[src] += w * buf[j].re * scale;
                den[src] += w * w;
            }
        }
        if let Some(i) = den.iter().position(|d| *d < 1e-10) {
            return Err(Error::Numeric(format!(
                "window sum vanishes at sample {i}; overlap-add cannot normalize"
            )));
        }
        Ok(num.iter().zip(&den).map(|(a, b)| a / b).collect())
    }
}

pub fn stft(x: &[f64], cfg: StftConfig) -> Result<ComplexSpectrogram> {
    Stft::new(cfg)?.forward(x)
}

pub fn istft(spec: &ComplexSpectrogram, cfg: StftConfig) -> Result<Vec<f64>> {
    Stft::new(cfg)?.inverse(spec)
}

/// Frobenius norm of a one-sided grid counted as the full two-sided spectrum
/// (interior bins twice), the norm in which the inverse is least-squares.
pub fn two_sided_norm_sq(bins: usize, frames: usize, f: impl Fn(usize) -> f64) -> f64 {
    let mut s = 0.0;
    for k in 0..bins {
        let w = if k == 0 || k == bins - 1 { 1.0 } else { 2.0 };
        for m in 0..frames {
            let v = f(k * frames + m);
            s += w * v * v;
        }
    }
    s
}

/// `‖|est| − target‖ / ‖target‖` in the two-sided norm.
pub fn spectral_convergence(est: &MagnitudeSpectrogram, target: &MagnitudeSpectrogram) -> f64 {
    let num = two_sided_norm_sq(est.bins, est.frames, |i| est.data[i] - target.data[i]);
    let den = two_sided_norm_sq(target.bins, target.frames, |i| target.data[i]);
    if den == 0.0 {
        num.sqrt()
    } else {
        (num / den).sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(seed: u64, n: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn default_grid() {
        let cfg = StftConfig::default();
        assert_eq!(cfg.bins(), 257);
        assert_eq!(cfg.frames(22050), 173);
        assert!(StftConfig { n_fft: 512, hop: 100 }.validate().is_err());
        assert_eq!(StftConfig::for_bins(257).unwrap(), cfg);
        assert_eq!(StftConfig::for_bins(16).unwrap().bins(), 16);
    }

    #[test]
    fn zero_signal_gives_zero_spectrogram() {
        let s = stft(&vec![0.0; 1000], StftConfig::default()).unwrap();
        assert!(s.data.iter().all(|c| c.norm() == 0.0));
        assert!(istft(&s, StftConfig::default()).unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn rejects_short_signals() {
        assert!(stft(&[0.0; 100], StftConfig::default()).is_err());
    }

    #[test]
    fn bin_centered_sine_concentrates_energy() {
        let cfg = StftConfig::default();
        let f = 32.0 / cfg.n_fft as f64;
        let x: Vec<f64> = (0..8192).map(|n| (2.0 * std::f64::consts::PI * f * n as f64).sin()).collect();
        let s = stft(&x, cfg).unwrap();
        // Interior frames only; edge frames see the reflected signal.
        for m in 4..s.frames - 4 {
            let total: f64 = (0..s.bins).map(|k| s.at(k, m).norm_sqr()).sum();
            let near: f64 = (31..=33).map(|k| s.at(k, m).norm_sqr()).sum();
            assert!(near / total >= 0.99, "frame {m}: {}", near / total);
        }
    }

    #[test]
    fn windowed_parseval_per_frame() {
        // For every frame, Σ_k |X_k|² over the full spectrum equals
        // n_fft · Σ_j (w_j x_j)² computed directly on the padded frame.
        let cfg = StftConfig { n_fft: 64, hop: 16 };
        let x = noise(4, 500);
        let st = Stft::new(cfg).unwrap();
        let s = st.forward(&x).unwrap();
        let w = cfg.window();
        for m in 0..s.frames {
            let direct: f64 = (0..cfg.n_fft)
                .map(|j| (x[st.source_index(m * cfg.hop + j, x.len())] * w[j]).powi(2))
                .sum::<f64>()
                * cfg.n_fft as f64;
            let spec = two_sided_norm_sq(s.bins, 1, |k| s.at(k, m).norm());
            assert!((spec - direct).abs() <= 1e-6 * direct, "{spec} vs {direct}");
        }
    }

    #[test]
    fn round_trip_is_identity() {
        for (seed, len) in [(1, 1000), (2, 22050), (3, 513)] {
            let x = noise(seed, len);
            let cfg = StftConfig::default();
            let y = istft(&stft(&x, cfg).unwrap(), cfg).unwrap();
            let err = x.iter().zip(&y).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err < 1e-12, "len {len}: {err}");
        }
    }

    #[test]
    fn istft_is_linear() {
        let cfg = StftConfig { n_fft: 64, hop: 16 };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let len = 300;
        let bins = cfg.bins();
        let frames = cfg.frames(len);
        let mut rand_spec = || {
            let mut s = ComplexSpectrogram::zeros(bins, frames, len);
            for c in &mut s.data {
                *c = Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            }
            s
        };
        let (a, b) = (rand_spec(), rand_spec());
        let mut sum = a.clone();
        for (s, v) in sum.data.iter_mut().zip(&b.data) {
            *s += v;
        }
        let (ya, yb, ys) = (istft(&a, cfg).unwrap(), istft(&b, cfg).unwrap(), istft(&sum, cfg).unwrap());
        for i in 0..len {
            assert!((ys[i] - ya[i] - yb[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn magnitude_invariant_to_sign_flip() {
        let x = noise(9, 700);
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        let cfg = StftConfig::default();
        let (a, b) = (stft(&x, cfg).unwrap().magnitude(), stft(&neg, cfg).unwrap().magnitude());
        assert_eq!(a, b);
    }
}
