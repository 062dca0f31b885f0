use crate::error::{Error, Result};

pub const DEFAULT_SAMPLE_RATE: u32 = 22_050;

/// Multi-channel (mono or binaural) audio. Channel 0 is left.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    channels: Vec<Vec<f64>>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(channels: Vec<Vec<f64>>, sample_rate: u32) -> Result<Self> {
        if channels.is_empty() || channels.len() > 2 {
            return Err(Error::InvalidArgument(format!(
                "waveform needs 1 or 2 channels, got {}",
                channels.len()
            )));
        }
        let len = channels[0].len();
        if channels.iter().any(|c| c.len() != len) {
            return Err(Error::InvalidArgument(
                "waveform channels differ in length".into(),
            ));
        }
        if channels.iter().flatten().any(|s| !s.is_finite()) {
            return Err(Error::Numeric("waveform contains non-finite samples".into()));
        }
        if sample_rate == 0 {
            return Err(Error::InvalidArgument("sample rate must be positive".into()));
        }
        Ok(Self {
            channels,
            sample_rate,
        })
    }

    pub fn mono(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        Self::new(vec![samples], sample_rate)
    }

    pub fn stereo(left: Vec<f64>, right: Vec<f64>, sample_rate: u32) -> Result<Self> {
        Self::new(vec![left, right], sample_rate)
    }

    pub fn silence(channels: usize, len: usize, sample_rate: u32) -> Result<Self> {
        Self::new(vec![vec![0.0; len]; channels], sample_rate)
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn len(&self) -> usize {
        self.channels[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn duration_secs(&self) -> f64 {
        self.len() as f64 / self.sample_rate as f64
    }

    pub fn channel(&self, i: usize) -> &[f64] {
        &self.channels[i]
    }

    pub fn channels(&self) -> &[Vec<f64>] {
        &self.channels
    }

    pub fn into_channels(self) -> Vec<Vec<f64>> {
        self.channels
    }

    /// Sum of squares over all channels.
    pub fn energy(&self) -> f64 {
        self.channels.iter().flatten().map(|s| s * s).sum()
    }

    pub fn channel_energy(&self, i: usize) -> f64 {
        self.channels[i].iter().map(|s| s * s).sum()
    }

    pub fn rms(&self, i: usize) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        (self.channel_energy(i) / self.len() as f64).sqrt()
    }

    /// Samples `[start, start + len)` of every channel.
    pub fn slice(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.len() {
            return Err(Error::InvalidArgument(format!(
                "slice {start}..{} exceeds {} samples",
                start + len,
                self.len()
            )));
        }
        Self::new(
            self.channels
                .iter()
                .map(|c| c[start..start + len].to_vec())
                .collect(),
            self.sample_rate,
        )
    }

    /// Rounds every sample to the nearest `f32`, the precision of float WAV
    /// files.
    pub fn round_to_f32(&self) -> Self {
        Self {
            channels: self
                .channels
                .iter()
                .map(|c| c.iter().map(|v| *v as f32 as f64).collect())
                .collect(),
            sample_rate: self.sample_rate,
        }
    }

    /// Mono view: the single channel, or the mean of left and right.
    pub fn to_mono(&self) -> Vec<f64> {
        match self.channels.as_slice() {
            [m] => m.clone(),
            [l, r] => l.iter().zip(r).map(|(a, b)| 0.5 * (a + b)).collect(),
            _ => unreachable!(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validates_channels() {
        assert!(Waveform::new(vec![], 22050).is_err());
        assert!(Waveform::new(vec![vec![0.0; 3], vec![0.0; 2]], 22050).is_err());
        assert!(Waveform::mono(vec![f64::NAN], 22050).is_err());
        let w = Waveform::stereo(vec![1.0, 0.0], vec![0.0, 2.0], 22050).unwrap();
        assert_eq!(w.energy(), 5.0);
        assert_eq!(w.to_mono(), vec![0.5, 1.0]);
    }
}
