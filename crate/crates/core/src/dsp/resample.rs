//! Rational-ratio polyphase resampling with a Blackman-windowed sinc.

use crate::error::{Error, Result};

/// Zero crossings of the interpolation kernel on each side, in units of the
/// lower of the two sample periods.
const HALF_ZEROS: usize = 24;

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

fn blackman(t: f64) -> f64 {
    // t in [-1, 1]
    let a = std::f64::consts::PI * (t + 1.0);
    0.42 - 0.5 * a.cos() + 0.08 * (2.0 * a).cos()
}

/// Resamples `x` from `from` Hz to `to` Hz. Output length is
/// `ceil(len · to / from)`.
pub fn resample(x: &[f64], from: u32, to: u32) -> Result<Vec<f64>> {
    if from == 0 || to == 0 {
        return Err(Error::InvalidArgument("sample rates must be positive".into()));
    }
    if from == to {
        return Ok(x.to_vec());
    }
    let g = gcd(from as u64, to as u64);
    let up = (to as u64 / g) as usize;
    let down = (from as u64 / g) as usize;
    // Cutoff relative to the input Nyquist.
    let cutoff = (up as f64 / down as f64).min(1.0);
    let half = (HALF_ZEROS as f64 / cutoff).ceil() as isize;
    let taps = 2 * half as usize + 1;

    // One filter per output phase: phase p interpolates at input offset p/up.
    let bank: Vec<Vec<f64>> = (0..up)
        .map(|p| {
            let frac = p as f64 / up as f64;
            (0..taps)
                .map(|j| {
                    let d = (j as isize - half) as f64 - frac;
                    let t = d / (half as f64 + 1.0);
                    cutoff * sinc(cutoff * d) * blackman(t)
                })
                .collect()
        })
        .collect();

    let out_len = (x.len() as u64 * up as u64).div_ceil(down as u64) as usize;
    let mut y = Vec::with_capacity(out_len);
    for n in 0..out_len {
        let pos = n * down;
        let base = (pos / up) as isize;
        let h = &bank[pos % up];
        let mut acc = 0.0;
        for (j, c) in h.iter().enumerate() {
            let k = base + j as isize - half;
            if k >= 0 && (k as usize) < x.len() {
                acc += c * x[k as usize];
            }
        }
        y.push(acc);
    }
    Ok(y)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(f: f64, sr: f64, n: usize) -> Vec<f64> {
        (0..n).map(|i| (2.0 * std::f64::consts::PI * f * i as f64 / sr).sin()).collect()
    }

    #[test]
    fn identity_rate_is_copy() {
        let x = tone(440.0, 22050.0, 100);
        assert_eq!(resample(&x, 22050, 22050).unwrap(), x);
    }

    #[test]
    fn downsampled_tone_matches_analytic_tone() {
        for from in [44100, 48000, 16000] {
            let x = tone(1000.0, from as f64, from as usize / 2);
            let y = resample(&x, from, 22050).unwrap();
            let expect = tone(1000.0, 22050.0, y.len());
            // Ignore the filter's edge transients.
            let err = y[200..y.len() - 200]
                .iter()
                .zip(&expect[200..])
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(err < 1e-3, "{from}: {err}");
            assert_eq!(y.len(), (x.len() as u64 * 22050).div_ceil(from as u64) as usize);
        }
    }

    #[test]
    fn content_above_new_nyquist_is_removed() {
        let x = tone(15000.0, 44100.0, 44100);
        let y = resample(&x, 44100, 22050).unwrap();
        let rms = (y[500..y.len() - 500].iter().map(|v| v * v).sum::<f64>() / (y.len() - 1000) as f64).sqrt();
        assert!(rms < 1e-3, "{rms}");
    }
}
