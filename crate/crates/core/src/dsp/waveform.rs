use std::path::Path;

use emoavse_tensor::Scalar;

use super::resample::resample_poly;
use crate::error::{Error, Result};

/// Mono audio: samples plus sample rate.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform<T> {
    pub samples: Vec<T>,
    pub sample_rate: u32,
}

impl<T: Scalar> Waveform<T> {
    /// Validated constructor: positive rate, non-empty, finite samples.
    pub fn new(samples: Vec<T>, sample_rate: u32) -> Result<Self> {
        let w = Self { samples, sample_rate };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 {
            return Err(Error::invalid("sample rate must be positive"));
        }
        if self.samples.is_empty() {
            return Err(Error::invalid("waveform is empty"));
        }
        if let Some(i) = self.samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::invalid(format!("non-finite sample at index {i}")));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn energy(&self) -> T {
        energy(&self.samples)
    }

    pub fn rms(&self) -> T {
        rms(&self.samples)
    }

    pub fn peak(&self) -> T {
        self.samples.iter().fold(T::zero(), |m, s| m.max(s.abs()))
    }

    pub fn cast<U: Scalar>(&self) -> Waveform<U> {
        Waveform {
            samples: self.samples.iter().map(|&s| U::lit(s.as_f64())).collect(),
            sample_rate: self.sample_rate,
        }
    }

    /// Resamples to `rate` with a Kaiser-windowed polyphase filter.
    pub fn resampled(&self, rate: u32) -> Result<Self> {
        if rate == 0 {
            return Err(Error::invalid("target sample rate must be positive"));
        }
        if rate == self.sample_rate {
            return Ok(self.clone());
        }
        Ok(Self {
            samples: resample_poly(&self.samples, rate as usize, self.sample_rate as usize),
            sample_rate: rate,
        })
    }
}

pub fn energy<T: Scalar>(x: &[T]) -> T {
    x.iter().map(|&v| v * v).sum()
}

pub fn rms<T: Scalar>(x: &[T]) -> T {
    if x.is_empty() {
        return T::zero();
    }
    (energy(x) / T::from_usize_lossy(x.len())).sqrt()
}

/// Sample encoding used when writing WAV files.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum WavEncoding {
    #[default]
    Pcm16,
    Float32,
}

/// Options controlling how a WAV file becomes a [`Waveform`].
#[derive(Clone, Copy, Debug)]
pub struct WavReadOptions {
    /// Target rate; other rates are resampled on load.
    pub sample_rate: u32,
    /// Average multichannel input to mono instead of rejecting it.
    pub downmix: bool,
}

impl Default for WavReadOptions {
    fn default() -> Self {
        Self { sample_rate: 16_000, downmix: false }
    }
}

/// Reads a 16-bit / 24-bit / 32-bit integer or float WAV file.
pub fn read_wav<T: Scalar>(path: &Path, opts: WavReadOptions) -> Result<Waveform<T>> {
    let wav_err = |source| Error::Wav { path: path.to_path_buf(), source };
    let mut reader = hound::WavReader::open(path).map_err(wav_err)?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels > 1 && !opts.downmix {
        return Err(Error::invalid(format!(
            "{} has {channels} channels; mono expected (use --downmix)",
            path.display()
        )));
    }
    let interleaved: Vec<f64> = match spec.sample_format {
        hound::SampleFormat::Float => reader
            .samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<Result<_, _>>()
            .map_err(wav_err)?,
        hound::SampleFormat::Int => {
            let scale = 1.0 / (1u64 << (spec.bits_per_sample - 1)) as f64;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f64 * scale))
                .collect::<Result<_, _>>()
                .map_err(wav_err)?
        }
    };
    let mono: Vec<T> = interleaved
        .chunks(channels)
        .map(|frame| T::lit(frame.iter().sum::<f64>() / channels as f64))
        .collect();
    let w = Waveform::new(mono, spec.sample_rate)
        .map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
    w.resampled(opts.sample_rate)
}

/// Writes mono audio. PCM output is rounded and saturated to the 16-bit range.
pub fn write_wav<T: Scalar>(path: &Path, w: &Waveform<T>, encoding: WavEncoding) -> Result<()> {
    let wav_err = |source| Error::Wav { path: path.to_path_buf(), source };
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: match encoding {
            WavEncoding::Pcm16 => 16,
            WavEncoding::Float32 => 32,
        },
        sample_format: match encoding {
            WavEncoding::Pcm16 => hound::SampleFormat::Int,
            WavEncoding::Float32 => hound::SampleFormat::Float,
        },
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(wav_err)?;
    for &s in &w.samples {
        let v = s.as_f64();
        match encoding {
            WavEncoding::Pcm16 => {
                let q = (v * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
                writer.write_sample(q).map_err(wav_err)?;
            }
            WavEncoding::Float32 => writer.write_sample(v as f32).map_err(wav_err)?,
        }
    }
    writer.finalize().map_err(wav_err)
}
