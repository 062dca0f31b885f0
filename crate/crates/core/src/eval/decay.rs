//! Room-acoustic parameters of an impulse response, all derived from the
//! backward-integrated energy decay.

use crate::error::{Error, Result};

/// Lowest value the decay curve reports; exact zeros of remaining energy
/// map here instead of `-inf`.
pub const DECAY_FLOOR_DB: f64 = -200.0;

/// T30 fit window.
const FIT_START_DB: f64 = -5.0;
const FIT_END_DB: f64 = -35.0;

/// Backward energy integral in dB, 0 dB at the first sample.
pub fn schroeder_curve(rir: &[f64]) -> Result<Vec<f64>> {
    let mut tail = vec![0.0; rir.len()];
    let mut acc = 0.0;
    for i in (0..rir.len()).rev() {
        acc += rir[i] * rir[i];
        tail[i] = acc;
    }
    if !(acc > 0.0) || !acc.is_finite() {
        return Err(Error::InvalidArgument("impulse response has no finite energy".into()));
    }
    Ok(tail
        .iter()
        .map(|&e| if e > 0.0 { (10.0 * (e / acc).log10()).max(DECAY_FLOOR_DB) } else { DECAY_FLOOR_DB })
        .collect())
}

fn lowest(curve: &[f64]) -> f64 {
    curve.iter().copied().fold(0.0, f64::min)
}

/// Reverberation time from a least-squares line through the decay curve
/// between -5 and -35 dB, extrapolated to a 60 dB drop.
pub fn t60(rir: &[f64], sample_rate: u32) -> Result<f64> {
    let curve = schroeder_curve(rir)?;
    let start = curve.iter().position(|&c| c <= FIT_START_DB);
    let end = curve.iter().position(|&c| c < FIT_END_DB);
    let (Some(start), Some(end)) = (start, end) else {
        return Err(Error::InsufficientDecay {
            needed_db: FIT_END_DB,
            reached_db: lowest(&curve),
        });
    };
    if end <= start + 1 {
        return Err(Error::Numeric("decay falls through the fit window within one sample".into()));
    }
    let sr = sample_rate as f64;
    let pts = &curve[start..end];
    let n = pts.len() as f64;
    let mean_t = (start..end).map(|i| i as f64 / sr).sum::<f64>() / n;
    let mean_c = pts.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (i, &c) in (start..end).zip(pts) {
        let dt = i as f64 / sr - mean_t;
        sxy += dt * (c - mean_c);
        sxx += dt * dt;
    }
    let slope = sxy / sxx;
    if !(slope < 0.0) {
        return Err(Error::Numeric(format!("decay slope {slope} dB/s is not negative")));
    }
    Ok(-60.0 / slope)
}

/// Clarity: early (first 50 ms after the peak tap) to late energy ratio in
/// dB. Returns `f64::INFINITY` when there is no late energy.
pub fn c50(rir: &[f64], sample_rate: u32) -> Result<f64> {
    let window = (0.05 * sample_rate as f64).round() as usize;
    if rir.len() <= window {
        return Err(Error::InvalidArgument(format!(
            "impulse response of {} samples is not longer than 50 ms ({window} samples)",
            rir.len()
        )));
    }
    let peak = rir
        .iter()
        .enumerate()
        .fold((0, 0.0f64), |(bi, bv), (i, &v)| if v.abs() > bv { (i, v.abs()) } else { (bi, bv) })
        .0;
    let split = (peak + window).min(rir.len());
    let early: f64 = rir[..split].iter().map(|v| v * v).sum();
    let late: f64 = rir[split..].iter().map(|v| v * v).sum();
    if !(early > 0.0) {
        return Err(Error::InvalidArgument("impulse response has no energy".into()));
    }
    if late == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (early / late).log10())
}

/// Early decay time: six times the time from the onset until the decay
/// curve crosses -10 dB (linearly interpolated between samples).
pub fn edt(rir: &[f64], sample_rate: u32) -> Result<f64> {
    let curve = schroeder_curve(rir)?;
    let onset = rir.iter().position(|&v| v != 0.0).expect("non-silent");
    let Some(i) = curve.iter().position(|&c| c <= -10.0) else {
        return Err(Error::InsufficientDecay {
            needed_db: -10.0,
            reached_db: lowest(&curve),
        });
    };
    // curve[i - 1] > -10 >= curve[i]; i >= 1 because curve[0] == 0.
    let (a, b) = (curve[i - 1], curve[i]);
    let frac = if a == b { 0.0 } else { (a + 10.0) / (a - b) };
    let t = (i - 1) as f64 + frac - onset as f64;
    Ok(6.0 * t / sample_rate as f64)
}
