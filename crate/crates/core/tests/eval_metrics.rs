use std::f64::consts::PI;

use avsurf::dsp::{StftConfig, Waveform};
use avsurf::eval::{
    c50, edt, env_distance, mag_distance, mono_energy, mono_mono, schroeder_curve, stereo_energy, t60, DECAY_FLOOR_DB,
};
use avsurf::scene::{build_dataset, SceneConfig};
use avsurf::Error;
use proptest::prelude::*;

const SR: u32 = 22050;

fn tone(len: usize, freq: f64, amp: f64, phase: f64) -> Vec<f64> {
    (0..len)
        .map(|i| amp * (2.0 * PI * freq * i as f64 / SR as f64 + phase).sin())
        .collect()
}

fn stereo(x: Vec<f64>) -> Waveform {
    Waveform::stereo(x.clone(), x, SR).unwrap()
}

/// Direct-summation magnitude STFT: centred frames with reflected edges,
/// periodic Hann window, one DFT sum per bin.
fn brute_force_magnitudes(x: &[f64], n_fft: usize, hop: usize) -> Vec<f64> {
    let half = n_fft as isize / 2;
    let n = x.len() as isize;
    let reflect = |mut i: isize| -> f64 {
        while i < 0 || i >= n {
            if i < 0 {
                i = -i;
            }
            if i >= n {
                i = 2 * (n - 1) - i;
            }
        }
        x[i as usize]
    };
    let frames = 1 + x.len() / hop;
    let mut out = Vec::new();
    for t in 0..frames {
        let start = (t * hop) as isize - half;
        for k in 0..=n_fft / 2 {
            let (mut re, mut im) = (0.0, 0.0);
            for m in 0..n_fft {
                let w = 0.5 - 0.5 * (2.0 * PI * m as f64 / n_fft as f64).cos();
                let v = w * reflect(start + m as isize);
                let a = -2.0 * PI * (k * m) as f64 / n_fft as f64;
                re += v * a.cos();
                im += v * a.sin();
            }
            out.push((re * re + im * im).sqrt());
        }
    }
    out
}

fn exp_rir(t60_s: f64, seconds: f64) -> Vec<f64> {
    let k = 3.0 * 10f64.ln() / t60_s;
    let len = (seconds * SR as f64) as usize;
    (0..len).map(|i| (-k * i as f64 / SR as f64).exp()).collect()
}

#[test]
fn mag_distance_of_identical_signals_is_zero() {
    let w = stereo(tone(3000, 440.0, 0.3, 0.0));
    assert_eq!(mag_distance(&w, &w, StftConfig::default()).unwrap(), 0.0);
}

#[test]
fn doubled_tone_distance_matches_direct_summation() {
    let x = tone(2048, 1000.0, 0.4, 0.2);
    let gt = stereo(x.clone());
    let pred = stereo(x.iter().map(|v| 2.0 * v).collect());
    let got = mag_distance(&pred, &gt, StftConfig::default()).unwrap();
    let expect = brute_force_magnitudes(&x, 512, 128).iter().map(|m| m * m).sum::<f64>().sqrt();
    assert!((got - expect).abs() < 1e-9 * expect.max(1.0), "{got} vs {expect}");
}

#[test]
fn envelope_distance_of_amplitudes() {
    let len = 8000;
    let a = stereo(tone(len, 441.0, 1.0, 0.0));
    let b = stereo(tone(len, 441.0, 0.5, 0.0));
    assert_eq!(env_distance(&a, &a).unwrap(), 0.0);
    // 441 Hz at 22050 Hz completes whole cycles in 8000 samples, so the
    // envelope is flat everywhere.
    let d = env_distance(&a, &b).unwrap();
    let expect = 0.5 * (len as f64).sqrt();
    assert!((d - expect).abs() < 0.01 * expect, "{d} vs {expect}");
}

#[test]
fn envelope_ignores_phase_of_narrowband_tone() {
    let len = 8000;
    let a = stereo(tone(len, 441.0, 0.8, 0.0));
    let b = stereo(tone(len, 441.0, 0.8, 1.3));
    let env = env_distance(&a, &b).unwrap();
    let mag = mag_distance(&a, &b, StftConfig::default()).unwrap();
    let raw: f64 = a.channel(0).iter().zip(b.channel(0)).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    assert!(env < 0.01 * raw, "env {env} vs waveform distance {raw}");
    assert!(env < 0.01 * mag.max(raw), "env {env} mag {mag}");
}

#[test]
fn schroeder_of_single_impulse() {
    let mut h = vec![0.0; 100];
    h[30] = 2.0;
    let c = schroeder_curve(&h).unwrap();
    assert!(c[..=30].iter().all(|&v| v == 0.0));
    assert!(c[31..].iter().all(|&v| v == DECAY_FLOOR_DB));
    assert!(matches!(schroeder_curve(&[0.0; 10]), Err(Error::InvalidArgument(_))));
}

#[test]
fn exponential_decay_slope() {
    for t in [0.2, 0.5, 1.0] {
        let h = exp_rir(t, 1.5 * t);
        let c = schroeder_curve(&h).unwrap();
        // Slope between 0.1 T and 0.4 T, where truncation has no visible effect.
        let (i0, i1) = ((0.1 * t * SR as f64) as usize, (0.4 * t * SR as f64) as usize);
        let slope = (c[i1] - c[i0]) / ((i1 - i0) as f64 / SR as f64);
        let expect = -60.0 / t;
        assert!((slope - expect).abs() < 0.02 * expect.abs(), "{slope} vs {expect}");
    }
}

#[test]
fn t60_of_exponential_and_invariances() {
    let h = exp_rir(0.5, 0.8);
    let t = t60(&h, SR).unwrap();
    assert!((t - 0.5).abs() < 0.025, "{t}");
    let scaled: Vec<f64> = h.iter().map(|v| 10.0 * v).collect();
    assert!((t60(&scaled, SR).unwrap() - t).abs() < 1e-9 * t);
    let mut dilated = vec![0.0; 2 * h.len()];
    for (i, v) in h.iter().enumerate() {
        dilated[2 * i] = *v;
    }
    let t2 = t60(&dilated, SR).unwrap();
    assert!((t2 - 2.0 * t).abs() < 0.05 * 2.0 * t, "{t2} vs {}", 2.0 * t);
}

#[test]
fn c50_closed_form_and_scale() {
    for t in [0.2, 0.5, 1.0] {
        let k = 3.0 * 10f64.ln() / t;
        let h = exp_rir(t, 3.0 * t);
        let expect = 10.0 * ((2.0 * k * 0.05).exp() - 1.0).log10();
        let got = c50(&h, SR).unwrap();
        assert!((got - expect).abs() < 0.1, "T={t}: {got} vs {expect}");
        let scaled: Vec<f64> = h.iter().map(|v| 0.01 * v).collect();
        assert!((c50(&scaled, SR).unwrap() - got).abs() < 1e-9);
    }
    let mut h = vec![0.0; 4000];
    h[100] = 1.0;
    h[900] = 0.3;
    assert_eq!(c50(&h, SR).unwrap(), f64::INFINITY);
}

#[test]
fn edt_of_uniform_and_two_slope_decays() {
    for t in [0.2, 0.5, 1.0] {
        let h = exp_rir(t, 1.5 * t);
        let e = edt(&h, SR).unwrap();
        assert!((e - t).abs() < 0.05 * t, "{e} vs {t}");
        let scaled: Vec<f64> = h.iter().map(|v| 3.0 * v).collect();
        assert!((edt(&scaled, SR).unwrap() - e).abs() < 1e-9);
    }
    // Strong fast component up front, weak slow tail.
    let fast = exp_rir(0.1, 1.2);
    let slow = exp_rir(1.0, 1.2);
    let h: Vec<f64> = fast.iter().zip(&slow).map(|(a, b)| a + 0.05 * b).collect();
    assert!(edt(&h, SR).unwrap() < t60(&h, SR).unwrap());
}

#[test]
fn baselines_match_energy_and_reproduce_duplicated_source() {
    let src = Waveform::mono(tone(2000, 300.0, 0.5, 0.0), SR).unwrap();
    let dup = mono_mono(&src).unwrap();
    assert_eq!(dup.channel(0), src.channel(0));
    assert_eq!(dup.channel(1), src.channel(0));
    let me = mono_energy(&src, &dup).unwrap();
    assert_eq!(mag_distance(&me, &dup, StftConfig::default()).unwrap(), 0.0);

    let gt = Waveform::stereo(tone(2000, 300.0, 0.2, 0.4), tone(2000, 300.0, 0.05, 0.9), SR).unwrap();
    let me = mono_energy(&src, &gt).unwrap();
    assert!((me.energy() - gt.energy()).abs() < 1e-9 * gt.energy());
    let se = stereo_energy(&src, &gt).unwrap();
    for c in 0..2 {
        assert!((se.channel_energy(c) - gt.channel_energy(c)).abs() < 1e-9 * gt.channel_energy(c));
    }
    let silent = Waveform::mono(vec![0.0; 2000], SR).unwrap();
    assert!(mono_energy(&silent, &gt).is_err());
    assert!(stereo_energy(&silent, &gt).is_err());
}

#[test]
fn energy_matching_beats_duplication_on_synthetic_room() {
    let ds = build_dataset(&SceneConfig::default()).unwrap();
    let cfg = StftConfig::default();
    let wins = ds
        .samples
        .iter()
        .filter(|s| {
            let mm = mag_distance(&mono_mono(&s.source).unwrap(), &s.target, cfg).unwrap();
            let me = mag_distance(&mono_energy(&s.source, &s.target).unwrap(), &s.target, cfg).unwrap();
            me < mm
        })
        .count();
    assert!(wins * 10 >= ds.samples.len() * 9, "{wins} of {}", ds.samples.len());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn distances_are_symmetric(a in prop::collection::vec(-1.0f64..1.0, 600), b in prop::collection::vec(-1.0f64..1.0, 600)) {
        let (wa, wb) = (stereo(a), stereo(b));
        let cfg = StftConfig::default();
        prop_assert_eq!(mag_distance(&wa, &wb, cfg).unwrap(), mag_distance(&wb, &wa, cfg).unwrap());
        prop_assert_eq!(env_distance(&wa, &wb).unwrap(), env_distance(&wb, &wa).unwrap());
    }

    #[test]
    fn schroeder_is_non_increasing(h in prop::collection::vec(-1.0f64..1.0, 1..300)) {
        prop_assume!(h.iter().any(|v| *v != 0.0));
        let c = schroeder_curve(&h).unwrap();
        prop_assert_eq!(c[0], 0.0);
        for w in c.windows(2) {
            prop_assert!(w[1] <= w[0]);
        }
    }
}
