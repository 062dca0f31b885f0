//! Time-frequency transforms, Griffin-Lim phase recovery and WAV I/O.

mod griffin_lim;
mod resample;
mod stft;
mod wav;
mod waveform;

pub use griffin_lim::{griffin_lim, griffin_lim_traced, GriffinLimTrace, PhaseInit, PhaseSource, DEFAULT_GL_ITERS};
pub use resample::resample;
pub use stft::{
    hann_periodic, istft, spectral_convergence, stft, two_sided_norm_sq, ComplexSpectrogram,
    MagnitudeSpectrogram, Stft, StftConfig,
};
pub use wav::{quantize_pcm16, wav_read, wav_read_native, wav_write, BitDepth};
pub use waveform::{Waveform, DEFAULT_SAMPLE_RATE};
