use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::dsp::{stft, StftConfig, Waveform};
use crate::error::{Error, Result};

fn check_pair(op: &'static str, pred: &Waveform, gt: &Waveform) -> Result<()> {
    if pred.num_channels() != gt.num_channels() || pred.len() != gt.len() {
        return Err(Error::shape(
            op,
            &[pred.num_channels(), pred.len()],
            &[gt.num_channels(), gt.len()],
        ));
    }
    if pred.sample_rate() != gt.sample_rate() {
        return Err(Error::InvalidArgument(format!(
            "{op}: sample rates differ ({} vs {} Hz)",
            pred.sample_rate(),
            gt.sample_rate()
        )));
    }
    Ok(())
}

/// Mean over channels of the Frobenius norm of the STFT magnitude
/// difference.
pub fn mag_distance(pred: &Waveform, gt: &Waveform, cfg: StftConfig) -> Result<f64> {
    check_pair("mag_distance", pred, gt)?;
    let mut total = 0.0;
    for c in 0..gt.num_channels() {
        let a = stft(pred.channel(c), cfg)?.magnitude();
        let b = stft(gt.channel(c), cfg)?.magnitude();
        let sq: f64 = a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum();
        total += sq.sqrt();
    }
    Ok(total / gt.num_channels() as f64)
}

/// Magnitude of the analytic signal, computed with one FFT of the full
/// signal length.
pub fn hilbert_envelope(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    if n == 0 {
        return Vec::new();
    }
    let mut planner = FftPlanner::<f64>::new();
    let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    planner.plan_fft_forward(n).process(&mut buf);
    // Keep DC (and Nyquist for even n), double positive frequencies, drop
    // negative ones.
    let half = n / 2;
    for (k, v) in buf.iter_mut().enumerate() {
        let w = if k == 0 || (n % 2 == 0 && k == half) {
            1.0
        } else if k <= (n - 1) / 2 {
            2.0
        } else {
            0.0
        };
        *v *= w;
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    buf.iter().map(|c| c.norm() / n as f64).collect()
}

/// Mean over channels of the L2 distance between Hilbert envelopes.
pub fn env_distance(pred: &Waveform, gt: &Waveform) -> Result<f64> {
    check_pair("env_distance", pred, gt)?;
    let mut total = 0.0;
    for c in 0..gt.num_channels() {
        let a = hilbert_envelope(pred.channel(c));
        let b = hilbert_envelope(gt.channel(c));
        total += a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    }
    Ok(total / gt.num_channels() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn envelope_of_cosine_with_whole_cycles_is_flat() {
        let n = 400;
        let x: Vec<f64> = (0..n)
            .map(|i| 0.7 * (2.0 * std::f64::consts::PI * 10.0 * i as f64 / n as f64).cos())
            .collect();
        for v in hilbert_envelope(&x) {
            assert!((v - 0.7).abs() < 1e-12);
        }
    }

    #[test]
    fn mismatched_lengths_rejected() {
        let a = Waveform::stereo(vec![0.0; 10], vec![0.0; 10], 22050).unwrap();
        let b = Waveform::stereo(vec![0.0; 11], vec![0.0; 11], 22050).unwrap();
        assert!(env_distance(&a, &b).is_err());
        assert!(mag_distance(&a, &b, StftConfig::default()).is_err());
    }
}
