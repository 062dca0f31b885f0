use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::stft::{spectral_convergence, stft, MagnitudeSpectrogram, Stft, StftConfig};
use crate::error::{Error, Result};

pub const DEFAULT_GL_ITERS: usize = 32;

/// Starting phase for Griffin-Lim.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseInit {
    /// All-zero phase; fully deterministic.
    Zero,
    /// Uniform phase in `[-π, π)` drawn from the given seed.
    Random(u64),
    /// Caller-supplied phase grid (for example the source signal's phase).
    Given(Vec<f64>),
}

impl Default for PhaseInit {
    fn default() -> Self {
        PhaseInit::Zero
    }
}

/// Where synthesis takes Griffin-Lim's starting phase from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseSource {
    /// Zero phase: recovery from scratch.
    #[default]
    Zero,
    /// Seeded uniform random phase.
    Random,
    /// The phase of the dry source signal's STFT.
    Source,
}

impl PhaseSource {
    /// The starting phase for magnitudes shaped like `source`'s STFT.
    pub fn init(self, source: &[f64], cfg: StftConfig, seed: u64) -> Result<PhaseInit> {
        Ok(match self {
            PhaseSource::Zero => PhaseInit::Zero,
            PhaseSource::Random => PhaseInit::Random(seed),
            PhaseSource::Source => PhaseInit::Given(stft(source, cfg)?.phase()),
        })
    }
}

/// Output of [`griffin_lim_traced`]: the waveform plus the spectral
/// convergence of every iterate, index 0 being the initial estimate.
#[derive(Clone, Debug)]
pub struct GriffinLimTrace {
    pub signal: Vec<f64>,
    pub convergence: Vec<f64>,
}

pub fn griffin_lim(
    mag: &MagnitudeSpectrogram,
    cfg: StftConfig,
    iters: usize,
    init: &PhaseInit,
) -> Result<Vec<f64>> {
    run(mag, cfg, iters, init, false).map(|t| t.signal)
}

pub fn griffin_lim_traced(
    mag: &MagnitudeSpectrogram,
    cfg: StftConfig,
    iters: usize,
    init: &PhaseInit,
) -> Result<GriffinLimTrace> {
    run(mag, cfg, iters, init, true)
}

fn run(
    mag: &MagnitudeSpectrogram,
    cfg: StftConfig,
    iters: usize,
    init: &PhaseInit,
    trace: bool,
) -> Result<GriffinLimTrace> {
    if iters == 0 {
        return Err(Error::InvalidArgument("griffin-lim needs at least one iteration".into()));
    }
    mag.check_nonnegative()?;
    let tf = Stft::new(cfg)?;
    let phase = match init {
        PhaseInit::Zero => vec![0.0; mag.data.len()],
        PhaseInit::Random(seed) => {
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            (0..mag.data.len())
                .map(|_| rng.random_range(-std::f64::consts::PI..std::f64::consts::PI))
                .collect()
        }
        PhaseInit::Given(p) => {
            if p.len() != mag.data.len() {
                return Err(Error::shape("griffin_lim phase", &[mag.data.len()], &[p.len()]));
            }
            p.clone()
        }
    };
    let mut x = tf.inverse(&mag.with_phase(&phase))?;
    let mut convergence = Vec::new();
    for _ in 0..iters {
        let spec = tf.forward(&x)?;
        if trace {
            convergence.push(spectral_convergence(&spec.magnitude(), mag));
        }
        let mut proj = spec;
        for (c, &m) in proj.data.iter_mut().zip(&mag.data) {
            let n = c.norm();
            *c = if n > 0.0 { *c * (m / n) } else { Complex64::new(m, 0.0) };
        }
        x = tf.inverse(&proj)?;
    }
    if trace {
        convergence.push(spectral_convergence(&tf.forward(&x)?.magnitude(), mag));
    }
    Ok(GriffinLimTrace {
        signal: x,
        convergence,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::stft::stft;

    fn chirp(len: usize) -> Vec<f64> {
        let sr = 22050.0;
        (0..len)
            .map(|n| {
                let t = n as f64 / sr;
                let f = 200.0 + 1500.0 * t;
                let env = (std::f64::consts::PI * t / (len as f64 / sr)).sin();
                env * (2.0 * std::f64::consts::PI * f * t).sin()
            })
            .collect()
    }

    #[test]
    fn zero_magnitude_gives_silence() {
        let cfg = StftConfig::default();
        let mag = MagnitudeSpectrogram::new(cfg.bins(), cfg.frames(2048), vec![0.0; cfg.bins() * cfg.frames(2048)], 2048).unwrap();
        let y = griffin_lim(&mag, cfg, 4, &PhaseInit::Zero).unwrap();
        assert!(y.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn rejects_bad_input() {
        let cfg = StftConfig::default();
        let n = cfg.bins() * cfg.frames(1024);
        let mut data = vec![1.0; n];
        data[3] = -1.0;
        let mag = MagnitudeSpectrogram::new(cfg.bins(), cfg.frames(1024), data, 1024).unwrap();
        assert!(griffin_lim(&mag, cfg, 4, &PhaseInit::Zero).is_err());
        let ok = MagnitudeSpectrogram::new(cfg.bins(), cfg.frames(1024), vec![1.0; n], 1024).unwrap();
        assert!(griffin_lim(&ok, cfg, 0, &PhaseInit::Zero).is_err());
    }

    #[test]
    fn convergence_is_monotone_on_chirp() {
        let cfg = StftConfig::default();
        let mag = stft(&chirp(11025), cfg).unwrap().magnitude();
        for init in [PhaseInit::Zero, PhaseInit::Random(3)] {
            let t = griffin_lim_traced(&mag, cfg, 32, &init).unwrap();
            for w in t.convergence.windows(2) {
                assert!(w[1] <= w[0] + 1e-9, "{:?}", t.convergence);
            }
            assert!(t.convergence[32] < t.convergence[1]);
        }
    }

    #[test]
    fn given_true_phase_reconstructs() {
        let cfg = StftConfig::default();
        let x = chirp(4000);
        let spec = stft(&x, cfg).unwrap();
        let y = griffin_lim(&spec.magnitude(), cfg, 1, &PhaseInit::Given(spec.phase())).unwrap();
        let err = x.iter().zip(&y).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn phase_sources_map_to_initial_phases() {
        let cfg = StftConfig::default();
        let x = chirp(3000);
        assert_eq!(PhaseSource::Zero.init(&x, cfg, 7).unwrap(), PhaseInit::Zero);
        assert_eq!(PhaseSource::Random.init(&x, cfg, 7).unwrap(), PhaseInit::Random(7));
        let spec = stft(&x, cfg).unwrap();
        let init = PhaseSource::Source.init(&x, cfg, 7).unwrap();
        assert_eq!(init, PhaseInit::Given(spec.phase()));
        // Reusing the source phase on the source's own magnitude recovers it.
        let y = griffin_lim(&spec.magnitude(), cfg, 1, &init).unwrap();
        let err = x.iter().zip(&y).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn single_bin_magnitude_yields_sinusoid() {
        let cfg = StftConfig::default();
        let len = 8192;
        let (bins, frames) = (cfg.bins(), cfg.frames(len));
        let bin = 40;
        let mut data = vec![0.0; bins * frames];
        data[bin * frames..(bin + 1) * frames].fill(1.0);
        let mag = MagnitudeSpectrogram::new(bins, frames, data, len).unwrap();
        let y = griffin_lim(&mag, cfg, 32, &PhaseInit::Zero).unwrap();
        // Plain DFT of the interior segment, evaluated directly.
        let seg = &y[1024..1024 + 4096];
        let power = |k: f64| {
            let (mut re, mut im) = (0.0, 0.0);
            for (n, v) in seg.iter().enumerate() {
                let a = 2.0 * std::f64::consts::PI * k * n as f64 / seg.len() as f64;
                re += v * a.cos();
                im -= v * a.sin();
            }
            re * re + im * im
        };
        // Bin 40 of a 512-point grid is bin 320 of a 4096-point grid.
        let total: f64 = (0..=2048).map(|k| power(k as f64)).sum();
        let near: f64 = (316..=324).map(|k| power(k as f64)).sum();
        assert!(near / total > 0.95, "{}", near / total);
    }
}
