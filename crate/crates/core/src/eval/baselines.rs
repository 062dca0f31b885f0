use crate::dsp::Waveform;
use crate::error::{Error, Result};

fn first_channel(src: &Waveform) -> Result<&[f64]> {
    if src.num_channels() == 0 || src.is_empty() {
        return Err(Error::InvalidArgument("baseline source is empty".into()));
    }
    Ok(src.channel(0))
}

fn check_lengths(src: &Waveform, gt: &Waveform) -> Result<()> {
    if src.len() != gt.len() || gt.num_channels() != 2 {
        return Err(Error::shape(
            "baseline",
            &[src.num_channels(), src.len()],
            &[gt.num_channels(), gt.len()],
        ));
    }
    Ok(())
}

/// The source copied into both ears.
pub fn mono_mono(src: &Waveform) -> Result<Waveform> {
    let x = first_channel(src)?.to_vec();
    Waveform::stereo(x.clone(), x, src.sample_rate())
}

/// [`mono_mono`] scaled so its total energy equals the target's.
pub fn mono_energy(src: &Waveform, gt: &Waveform) -> Result<Waveform> {
    check_lengths(src, gt)?;
    let dup = mono_mono(src)?;
    let e = dup.energy();
    if !(e > 0.0) {
        return Err(Error::InvalidArgument("cannot energy-match a silent source".into()));
    }
    let k = (gt.energy() / e).sqrt();
    let x: Vec<f64> = dup.channel(0).iter().map(|v| v * k).collect();
    Waveform::stereo(x.clone(), x, src.sample_rate())
}

/// Each source channel scaled to the energy of the matching target
/// channel. A mono source is duplicated first.
pub fn stereo_energy(src: &Waveform, gt: &Waveform) -> Result<Waveform> {
    check_lengths(src, gt)?;
    let stereo = if src.num_channels() == 1 { mono_mono(src)? } else { src.clone() };
    let mut out = Vec::with_capacity(2);
    for c in 0..2 {
        let e = stereo.channel_energy(c);
        if !(e > 0.0) {
            return Err(Error::InvalidArgument(format!("cannot energy-match silent source channel {c}")));
        }
        let k = (gt.channel_energy(c) / e).sqrt();
        out.push(stereo.channel(c).iter().map(|v| v * k).collect());
    }
    Waveform::new(out, src.sample_rate())
}
