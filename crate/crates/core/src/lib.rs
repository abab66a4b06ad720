//! Emotion-aware audio-visual speech enhancement.

pub mod data;
pub mod dsp;
pub mod emotion;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod selftest;
pub mod synth;
pub mod train;
pub mod util;
pub mod visual;

pub use error::{Error, Result};

pub type Waveform32 = dsp::Waveform<f32>;
pub type Waveform64 = dsp::Waveform<f64>;
pub type Spectrogram32 = dsp::Spectrogram<f32>;
pub type Spectrogram64 = dsp::Spectrogram<f64>;
pub type Model32 = model::Model<f32>;
pub type Model64 = model::Model<f64>;
pub type Checkpoint32 = model::Checkpoint<f32>;
pub type ParamSet32 = nn::ParamSet<f32>;
pub type Example32 = train::Example<f32>;
