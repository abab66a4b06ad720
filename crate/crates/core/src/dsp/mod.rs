//! Waveform I/O, resampling and the STFT analysis/synthesis pair.

pub mod resample;
pub mod stft;
pub mod waveform;

pub use resample::{resample_poly, ResampleFilter};
pub use stft::{istft, mixed_phase_resynthesis, stft, Spectrogram, StftParams, StftPlan, WindowKind};
pub use waveform::{energy, read_wav, rms, write_wav, WavEncoding, WavReadOptions, Waveform};
