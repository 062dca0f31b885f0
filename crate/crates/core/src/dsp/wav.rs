use std::path::Path;

use serde::{Deserialize, Serialize};

use super::resample::resample;
use super::waveform::{Waveform, DEFAULT_SAMPLE_RATE};
use crate::error::{Error, Result};

/// Sample encoding used when writing.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BitDepth {
    #[default]
    Pcm16,
    Float32,
}

const PCM16_SCALE: f64 = 32768.0;

/// Quantizes one sample to PCM16, clamping to `[-1, 1)`.
pub fn quantize_pcm16(x: f64) -> i16 {
    let v = (x.clamp(-1.0, 1.0) * PCM16_SCALE).round();
    v.clamp(-32768.0, 32767.0) as i16
}

/// Reads a WAV file as is, at its native rate.
pub fn wav_read_native(path: &Path) -> Result<Waveform> {
    let mut reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::UnsupportedWav(format!("{}: {other}", path.display())),
    })?;
    let spec = reader.spec();
    let nch = spec.channels as usize;
    if nch == 0 || nch > 2 {
        return Err(Error::UnsupportedWav(format!(
            "{}: {} channels (expected 1 or 2)",
            path.display(),
            nch
        )));
    }
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f64 / PCM16_SCALE))
            .collect::<std::result::Result<_, _>>()?,
        (hound::SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<std::result::Result<_, _>>()?,
        (fmt, bits) => {
            return Err(Error::UnsupportedWav(format!(
                "{}: {bits}-bit {fmt:?} samples (expected PCM16 or float32)",
                path.display()
            )))
        }
    };
    let mut channels = vec![Vec::with_capacity(interleaved.len() / nch); nch];
    for (i, v) in interleaved.into_iter().enumerate() {
        channels[i % nch].push(v);
    }
    Waveform::new(channels, spec.sample_rate)
}

/// Reads a WAV file, resampling to the canonical rate if needed.
pub fn wav_read(path: &Path) -> Result<Waveform> {
    let w = wav_read_native(path)?;
    if w.sample_rate() == DEFAULT_SAMPLE_RATE {
        return Ok(w);
    }
    log::info!(
        "resampling {} from {} Hz to {} Hz",
        path.display(),
        w.sample_rate(),
        DEFAULT_SAMPLE_RATE
    );
    let from = w.sample_rate();
    let channels = w
        .channels()
        .iter()
        .map(|c| resample(c, from, DEFAULT_SAMPLE_RATE))
        .collect::<Result<Vec<_>>>()?;
    Waveform::new(channels, DEFAULT_SAMPLE_RATE)
}

pub fn wav_write(path: &Path, w: &Waveform, depth: BitDepth) -> Result<()> {
    let spec = hound::WavSpec {
        channels: w.num_channels() as u16,
        sample_rate: w.sample_rate(),
        bits_per_sample: match depth {
            BitDepth::Pcm16 => 16,
            BitDepth::Float32 => 32,
        },
        sample_format: match depth {
            BitDepth::Pcm16 => hound::SampleFormat::Int,
            BitDepth::Float32 => hound::SampleFormat::Float,
        },
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::from(other),
    })?;
    for i in 0..w.len() {
        for c in w.channels() {
            match depth {
                BitDepth::Pcm16 => writer.write_sample(quantize_pcm16(c[i]))?,
                BitDepth::Float32 => writer.write_sample(c[i] as f32)?,
            }
        }
    }
    writer.finalize()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pcm16_quantization() {
        assert_eq!(quantize_pcm16(0.5), 16384);
        assert_eq!(quantize_pcm16(1.0), 32767);
        assert_eq!(quantize_pcm16(7.0), 32767);
        assert_eq!(quantize_pcm16(-1.0), -32768);
        assert_eq!(quantize_pcm16(-3.0), -32768);
        assert_eq!(quantize_pcm16(0.0), 0);
    }
}
