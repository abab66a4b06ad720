//! Short-time objective intelligibility.
//!
//! Both signals are resampled to 10 kHz, silent frames (more than 40 dB below
//! the loudest clean frame) are removed, and 256-sample Hann frames with 50 %
//! overlap are grouped into 15 one-third-octave bands from 150 Hz. Each
//! 30-frame band envelope of the degraded signal is gain-normalised to the
//! clean one, clipped at a −15 dB signal-to-distortion bound and correlated with
//! the clean envelope; the score is the mean correlation.

use emoavse_tensor::ndarray::Array2;
use emoavse_tensor::Scalar;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::dsp::{ResampleFilter, Waveform};
use crate::error::{Error, Result};

pub const STOI_FS: usize = 10_000;
pub const FRAME_LEN: usize = 256;
pub const FRAME_HOP: usize = 128;
pub const NFFT: usize = 512;
pub const NUM_BANDS: usize = 15;
pub const MIN_FREQ: f64 = 150.0;
pub const SEGMENT: usize = 30;
pub const BETA_DB: f64 = -15.0;
pub const DYN_RANGE_DB: f64 = 40.0;
/// Double-precision machine epsilon, used as the normalisation guard.
pub const EPS: f64 = f64::EPSILON;
/// Returned when fewer than [`SEGMENT`] frames survive silence removal.
pub const DEGENERATE_SCORE: f64 = 1e-5;

/// `N`-point Hann window without its zero endpoints (`hanning(N+2)[1..N+1]`).
pub fn frame_window<T: Scalar>() -> Vec<T> {
    let m = (FRAME_LEN + 1) as f64;
    (1..=FRAME_LEN)
        .map(|n| T::lit(0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / m).cos()))
        .collect()
}

/// Start offsets of analysis frames: `0, hop, …` strictly below `len - frame`.
pub fn frame_starts(len: usize) -> impl Iterator<Item = usize> {
    (0..len.saturating_sub(FRAME_LEN)).step_by(FRAME_HOP)
}

/// One-third-octave band matrix as half-open bin ranges `[lo, hi)`.
pub fn third_octave_bands(fs: usize, nfft: usize, num_bands: usize, min_freq: f64) -> Vec<(usize, usize)> {
    let freqs: Vec<f64> = (0..=nfft / 2).map(|i| i as f64 * fs as f64 / nfft as f64).collect();
    let nearest = |target: f64| {
        let mut best = 0;
        for (i, f) in freqs.iter().enumerate() {
            if (f - target).powi(2) < (freqs[best] - target).powi(2) {
                best = i;
            }
        }
        best
    };
    (0..num_bands)
        .map(|k| {
            let k = k as f64;
            let lo = min_freq * 2f64.powf((2.0 * k - 1.0) / 6.0);
            let hi = min_freq * 2f64.powf((2.0 * k + 1.0) / 6.0);
            (nearest(lo), nearest(hi))
        })
        .collect()
}

/// Removes frames of both signals where the clean frame energy is more than
/// `dyn_range` dB below the loudest clean frame, then overlap-adds the
/// (windowed) remaining frames back into signals.
pub fn remove_silent_frames<T: Scalar>(x: &[T], y: &[T], dyn_range: f64) -> (Vec<T>, Vec<T>) {
    let w = frame_window::<T>();
    let starts: Vec<usize> = frame_starts(x.len()).collect();
    let energies: Vec<f64> = starts
        .iter()
        .map(|&s| {
            let e: f64 = (0..FRAME_LEN).map(|n| (x[s + n] * w[n]).as_f64().powi(2)).sum();
            20.0 * (e.sqrt() + EPS).log10()
        })
        .collect();
    let max = energies.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let kept: Vec<usize> = starts
        .iter()
        .zip(&energies)
        .filter(|(_, &e)| max - dyn_range - e < 0.0)
        .map(|(&s, _)| s)
        .collect();
    if kept.is_empty() {
        return (Vec::new(), Vec::new());
    }
    let out_len = (kept.len() - 1) * FRAME_HOP + FRAME_LEN;
    let mut xo = vec![T::zero(); out_len];
    let mut yo = vec![T::zero(); out_len];
    for (j, &s) in kept.iter().enumerate() {
        for n in 0..FRAME_LEN {
            xo[j * FRAME_HOP + n] += x[s + n] * w[n];
            yo[j * FRAME_HOP + n] += y[s + n] * w[n];
        }
    }
    (xo, yo)
}

/// Framewise half spectra (frames × 257) of Hann-windowed 256-sample frames.
pub(crate) fn frame_spectra<T: Scalar>(x: &[T], planner: &mut FftPlanner<T>) -> Vec<Vec<Complex<T>>> {
    let fft = planner.plan_fft_forward(NFFT);
    let w = frame_window::<T>();
    frame_starts(x.len())
        .map(|s| {
            let mut buf = vec![Complex::new(T::zero(), T::zero()); NFFT];
            for n in 0..FRAME_LEN {
                buf[n].re = x[s + n] * w[n];
            }
            fft.process(&mut buf);
            buf.truncate(NFFT / 2 + 1);
            buf
        })
        .collect()
}

/// Band envelopes (bands × frames): square root of summed bin power.
pub(crate) fn band_envelopes<T: Scalar>(spectra: &[Vec<Complex<T>>], bands: &[(usize, usize)]) -> Array2<T> {
    Array2::from_shape_fn((bands.len(), spectra.len()), |(j, t)| {
        let (lo, hi) = bands[j];
        spectra[t][lo..hi].iter().map(|c| c.norm_sqr()).sum::<T>().sqrt()
    })
}

/// Per-(segment, band) intermediate terms, kept for the backward pass.
pub(crate) struct SegmentTerms<T> {
    pub correlation: T,
    pub alpha: T,
    pub y_norm: T,
    pub x_norm: T,
    pub clipped: Vec<bool>,
    pub yc: Vec<T>,
    pub yc_norm: T,
    pub xhat: Vec<T>,
}

/// Correlation of one clean/degraded envelope segment pair.
pub(crate) fn segment_correlation<T: Scalar>(x: &[T], y: &[T]) -> SegmentTerms<T> {
    let eps = T::lit(EPS);
    let clip = T::one() + T::lit(10f64.powf(-BETA_DB / 20.0));
    let norm = |v: &[T]| v.iter().map(|&a| a * a).sum::<T>().sqrt();
    let x_norm = norm(x);
    let y_norm = norm(y);
    let alpha = x_norm / (y_norm + eps);
    let mut clipped = Vec::with_capacity(y.len());
    let yp: Vec<T> = y
        .iter()
        .zip(x)
        .map(|(&yi, &xi)| {
            let a = yi * alpha;
            let b = xi * clip;
            clipped.push(b < a);
            a.min(b)
        })
        .collect();
    let n = T::from_usize_lossy(y.len());
    let ym = yp.iter().copied().sum::<T>() / n;
    let xm = x.iter().copied().sum::<T>() / n;
    let yc: Vec<T> = yp.iter().map(|&v| v - ym).collect();
    let xc: Vec<T> = x.iter().map(|&v| v - xm).collect();
    let yc_norm = norm(&yc);
    let xc_norm = norm(&xc);
    let xhat: Vec<T> = xc.iter().map(|&v| v / (xc_norm + eps)).collect();
    let correlation = yc.iter().zip(&xhat).map(|(&a, &b)| a / (yc_norm + eps) * b).sum();
    SegmentTerms { correlation, alpha, y_norm, x_norm, clipped, yc, yc_norm, xhat }
}

/// Mean segment correlation between two band-envelope matrices, or `None`
/// when there are fewer than [`SEGMENT`] frames.
pub(crate) fn envelope_score<T: Scalar>(xe: &Array2<T>, ye: &Array2<T>) -> Option<T> {
    let frames = xe.ncols();
    if frames < SEGMENT {
        return None;
    }
    let mut total = T::zero();
    let mut count = 0usize;
    for m in SEGMENT..=frames {
        for j in 0..xe.nrows() {
            let xs: Vec<T> = (m - SEGMENT..m).map(|t| xe[[j, t]]).collect();
            let ys: Vec<T> = (m - SEGMENT..m).map(|t| ye[[j, t]]).collect();
            total += segment_correlation(&xs, &ys).correlation;
            count += 1;
        }
    }
    Some(total / T::from_usize_lossy(count))
}

/// STOI of `degraded` against `clean`, both at `fs` Hz.
pub fn stoi_score<T: Scalar>(clean: &[T], degraded: &[T], fs: usize) -> Result<f64> {
    if clean.len() != degraded.len() {
        return Err(Error::shape(format!(
            "clean has {} samples, degraded {}",
            clean.len(),
            degraded.len()
        )));
    }
    if fs == 0 {
        return Err(Error::invalid("sample rate must be positive"));
    }
    let (x, y) = if fs != STOI_FS {
        let f = ResampleFilter::new(STOI_FS, fs);
        (f.apply(clean), f.apply(degraded))
    } else {
        (clean.to_vec(), degraded.to_vec())
    };
    let (x, y) = remove_silent_frames(&x, &y, DYN_RANGE_DB);
    let mut planner = FftPlanner::new();
    let bands = third_octave_bands(STOI_FS, NFFT, NUM_BANDS, MIN_FREQ);
    let xe = band_envelopes(&frame_spectra(&x, &mut planner), &bands);
    let ye = band_envelopes(&frame_spectra(&y, &mut planner), &bands);
    Ok(envelope_score(&xe, &ye).map_or(DEGENERATE_SCORE, |d| d.as_f64()))
}

/// STOI of a degraded waveform against its clean reference.
pub fn stoi_metric<T: Scalar>(reference: &Waveform<T>, degraded: &Waveform<T>) -> Result<f64> {
    if reference.sample_rate != degraded.sample_rate {
        return Err(Error::invalid(format!(
            "sample rates differ: {} vs {}",
            reference.sample_rate, degraded.sample_rate
        )));
    }
    stoi_score(&reference.samples, &degraded.samples, reference.sample_rate as usize)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn band_edges_at_10k() {
        let bands = third_octave_bands(STOI_FS, NFFT, NUM_BANDS, MIN_FREQ);
        assert_eq!(bands.len(), 15);
        // 150 Hz band: edges 133.6 / 168.4 Hz → bins 7 and 9 at 19.53 Hz spacing.
        assert_eq!(bands[0], (7, 9));
        assert!(bands.windows(2).all(|w| w[0].1 <= w[1].1));
        assert!(bands[14].1 <= 257);
    }

    #[test]
    fn frame_window_is_symmetric_without_zero_ends() {
        let w: Vec<f64> = frame_window();
        assert!(w[0] > 0.0);
        assert!((w[0] - w[255]).abs() < 1e-15);
    }

    #[test]
    fn frame_starts_exclude_the_last_full_frame() {
        assert_eq!(frame_starts(512).collect::<Vec<_>>(), vec![0, 128]);
        assert_eq!(frame_starts(256).count(), 0);
    }

    #[test]
    fn short_signals_give_degenerate_score() {
        let x: Vec<f64> = (0..2000).map(|i| (i as f64 * 0.3).sin()).collect();
        assert_eq!(stoi_score(&x, &x, 10_000).unwrap(), DEGENERATE_SCORE);
    }

    #[test]
    fn mismatched_inputs_are_errors() {
        assert!(stoi_score(&[0.0f64; 10], &[0.0; 11], 16_000).is_err());
        let a = Waveform::new(vec![0.1f64; 100], 16_000).unwrap();
        let b = Waveform::new(vec![0.1f64; 100], 8_000).unwrap();
        assert!(stoi_metric(&a, &b).is_err());
    }
}
