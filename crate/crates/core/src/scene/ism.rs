//! Image-source room acoustics for shoebox rooms.

use super::geometry::{distance, CameraPose, RoomSpec, Vec3, WALLS};
use crate::dsp::Waveform;
use crate::error::{Error, Result};

/// Half the interaural distance in meters.
pub const EAR_OFFSET: f64 = 0.09;
pub const DEFAULT_ORDER: usize = 3;

/// One propagation path: arrival time and per-band amplitude.
#[derive(Clone, Debug, PartialEq)]
pub struct Tap {
    pub delay_s: f64,
    pub gains: Vec<f64>,
    /// Reflection count per wall.
    pub reflections: [u32; WALLS],
}

impl Tap {
    /// Band-averaged amplitude.
    pub fn gain(&self) -> f64 {
        self.gains.iter().sum::<f64>() / self.gains.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BinauralRir {
    pub left: Vec<Tap>,
    pub right: Vec<Tap>,
}

/// Image positions of `source` with at most `order` reflections, paired
/// with their per-wall reflection counts.
pub fn image_sources(room: &RoomSpec, source: Vec3, order: usize) -> Vec<(Vec3, [u32; WALLS])> {
    let ord = order as i64;
    let mut out = Vec::new();
    // Per axis: image coordinate (1 - 2q)·s + 2n·L reflects |n - q| times
    // off the low wall and |n| times off the high wall.
    let axis_terms = |axis: usize| {
        let mut v = Vec::new();
        for n in -ord..=ord {
            for q in 0..2i64 {
                let low = (n - q).unsigned_abs() as u32;
                let high = n.unsigned_abs() as u32;
                if (low + high) as i64 <= ord {
                    let coord = (1 - 2 * q) as f64 * source[axis] + 2.0 * n as f64 * room.dimensions[axis];
                    v.push((coord, low, high));
                }
            }
        }
        v
    };
    let (xs, ys, zs) = (axis_terms(0), axis_terms(1), axis_terms(2));
    for &(x, x0, x1) in &xs {
        for &(y, y0, y1) in &ys {
            for &(z, z0, z1) in &zs {
                let counts = [x0, x1, y0, y1, z0, z1];
                if counts.iter().sum::<u32>() as usize <= order {
                    out.push(([x, y, z], counts));
                }
            }
        }
    }
    out
}

fn taps_for_receiver(room: &RoomSpec, images: &[(Vec3, [u32; WALLS])], receiver: Vec3) -> Vec<Tap> {
    let mut taps: Vec<Tap> = images
        .iter()
        .map(|(img, counts)| {
            let d = distance(*img, receiver);
            let gains = room
                .absorption
                .iter()
                .map(|band| {
                    let mut g = 1.0 / d;
                    for w in 0..WALLS {
                        g *= (1.0 - band[w]).powi(counts[w] as i32);
                    }
                    g
                })
                .collect();
            Tap {
                delay_s: d / room.speed_of_sound,
                gains,
                reflections: *counts,
            }
        })
        .collect();
    taps.sort_by(|a, b| a.delay_s.total_cmp(&b.delay_s));
    taps
}

/// Image-source impulse responses at both ears of `pose`.
pub fn simulate_rir(room: &RoomSpec, emitter: Vec3, pose: &CameraPose, order: usize) -> Result<BinauralRir> {
    room.validate()?;
    pose.validate()?;
    room.check_inside("emitter", emitter)?;
    room.check_inside("listener", pose.position)?;
    let (l, r) = pose.ears(EAR_OFFSET);
    room.check_inside("left ear", l)?;
    room.check_inside("right ear", r)?;
    let images = image_sources(room, emitter, order);
    Ok(BinauralRir {
        left: taps_for_receiver(room, &images, l),
        right: taps_for_receiver(room, &images, r),
    })
}

/// Renders taps (band-averaged) into a sampled impulse response of `len`
/// samples, splitting each fractional delay linearly between neighbours.
pub fn sample_taps(taps: &[Tap], sample_rate: u32, len: usize) -> Vec<f64> {
    let mut h = vec![0.0; len];
    for t in taps {
        let pos = t.delay_s * sample_rate as f64;
        let i = pos.floor() as usize;
        let frac = pos - i as f64;
        let g = t.gain();
        if i < len {
            h[i] += g * (1.0 - frac);
        }
        if i + 1 < len {
            h[i + 1] += g * frac;
        }
    }
    h
}

/// Length in samples that holds every tap of `rir`.
pub fn rir_len(rir: &BinauralRir, sample_rate: u32) -> usize {
    let last = rir
        .left
        .iter()
        .chain(&rir.right)
        .map(|t| t.delay_s)
        .fold(0.0, f64::max);
    (last * sample_rate as f64).floor() as usize + 2
}

/// Causal sparse convolution truncated to the input length.
fn convolve_taps(x: &[f64], taps: &[Tap], sample_rate: u32) -> Vec<f64> {
    let mut y = vec![0.0; x.len()];
    let mut add = |offset: usize, g: f64| {
        if g == 0.0 || offset >= x.len() {
            return;
        }
        for (yo, xi) in y[offset..].iter_mut().zip(x) {
            *yo += g * xi;
        }
    };
    for t in taps {
        let pos = t.delay_s * sample_rate as f64;
        let i = pos.floor() as usize;
        let frac = pos - i as f64;
        let g = t.gain();
        add(i, g * (1.0 - frac));
        add(i + 1, g * frac);
    }
    y
}

/// Binaural rendering of a mono source: each ear's signal is the source
/// convolved with that ear's impulse response, truncated to the source
/// length.
pub fn simulate_binaural(
    room: &RoomSpec,
    emitter: Vec3,
    pose: &CameraPose,
    source: &Waveform,
    order: usize,
) -> Result<Waveform> {
    if source.num_channels() != 1 {
        return Err(Error::InvalidArgument(format!(
            "binaural simulation needs a mono source, got {} channels",
            source.num_channels()
        )));
    }
    let rir = simulate_rir(room, emitter, pose, order)?;
    let sr = source.sample_rate();
    let x = source.channel(0);
    Waveform::stereo(
        convolve_taps(x, &rir.left, sr),
        convolve_taps(x, &rir.right, sr),
        sr,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn image_counts_per_order() {
        let room = RoomSpec::shoebox([3.0, 3.0, 3.0], 0.1).unwrap();
        // Images with exactly k reflections number 4k² + 2 for k ≥ 1.
        let expect = [1, 7, 25, 63];
        for (order, n) in expect.iter().enumerate() {
            assert_eq!(image_sources(&room, [1.0, 1.2, 1.4], order).len(), *n);
        }
    }

    #[test]
    fn fractional_delay_splits_linearly() {
        let tap = Tap {
            delay_s: 2.25 / 100.0,
            gains: vec![2.0],
            reflections: [0; WALLS],
        };
        let h = sample_taps(&[tap], 100, 5);
        assert_eq!(h, vec![0.0, 0.0, 1.5, 0.5, 0.0]);
    }

    #[test]
    fn mono_source_required() {
        let room = RoomSpec::default();
        let pose = CameraPose::from_yaw_pitch([2.0, 2.0, 1.5], 0.0, 0.0);
        let src = Waveform::stereo(vec![0.0; 4], vec![0.0; 4], 22050).unwrap();
        assert!(simulate_binaural(&room, [1.0, 1.0, 1.0], &pose, &src, 1).is_err());
    }
}
