//! Differentiable intelligibility loss: the negative STOI correlation without
//! silent-frame removal, with a hand-written backward pass.

use emoavse_tensor::ndarray::Array2;
use emoavse_tensor::Scalar;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::LossValue;
use crate::dsp::ResampleFilter;
use crate::error::{Error, Result};
use crate::metrics::stoi::{
    band_envelopes, frame_spectra, frame_starts, frame_window, segment_correlation, third_octave_bands, SegmentTerms,
    EPS, FRAME_LEN, MIN_FREQ, NFFT, NUM_BANDS, SEGMENT, STOI_FS,
};

/// Gradient of one segment correlation with respect to the degraded envelope
/// segment `y`, scaled by the upstream derivative `dr`.
fn segment_backward<T: Scalar>(t: &SegmentTerms<T>, y: &[T], dr: T) -> Vec<T> {
    let eps = T::lit(EPS);
    let n = y.len();
    let den = t.yc_norm + eps;
    let dot: T = t.yc.iter().zip(&t.xhat).map(|(&a, &b)| a * b).sum();
    let g_yc: Vec<T> = (0..n)
        .map(|i| {
            let mut g = t.xhat[i] / den;
            if t.yc_norm > T::zero() {
                g -= t.yc[i] * dot / (den * den * t.yc_norm);
            }
            g * dr
        })
        .collect();
    let mean = g_yc.iter().copied().sum::<T>() / T::from_usize_lossy(n);
    let g_yn: Vec<T> = (0..n)
        .map(|i| if t.clipped[i] { T::zero() } else { g_yc[i] - mean })
        .collect();
    let proj: T = g_yn.iter().zip(y).map(|(&g, &v)| g * v).sum();
    let yden = t.y_norm + eps;
    (0..n)
        .map(|i| {
            let mut g = t.alpha * g_yn[i];
            if t.y_norm > T::zero() {
                g -= t.x_norm * proj * y[i] / (yden * yden * t.y_norm);
            }
            g
        })
        .collect()
}

/// Returns `−d` for the STOI-style correlation `d` between `est` and
/// `reference` (both at `fs` Hz) and the gradient with respect to `est`.
pub fn stoi_loss<T: Scalar>(est: &[T], reference: &[T], fs: usize) -> Result<(LossValue<T>, Vec<T>)> {
    if est.len() != reference.len() {
        return Err(Error::shape(format!(
            "estimate has {} samples, reference {}",
            est.len(),
            reference.len()
        )));
    }
    if fs == 0 {
        return Err(Error::invalid("sample rate must be positive"));
    }
    let filter = (fs != STOI_FS).then(|| ResampleFilter::new(STOI_FS, fs));
    let (y, x) = match &filter {
        Some(f) => (f.apply(est), f.apply(reference)),
        None => (est.to_vec(), reference.to_vec()),
    };
    let frames = frame_starts(y.len()).count();
    if frames < SEGMENT {
        return Err(Error::invalid(format!(
            "signal too short: {frames} analysis frames, need at least {SEGMENT}"
        )));
    }

    let mut planner = FftPlanner::new();
    let bands = third_octave_bands(STOI_FS, NFFT, NUM_BANDS, MIN_FREQ);
    let y_spec = frame_spectra(&y, &mut planner);
    let xe = band_envelopes(&frame_spectra(&x, &mut planner), &bands);
    let ye = band_envelopes(&y_spec, &bands);

    let segments = frames - SEGMENT + 1;
    let dr = T::one() / T::from_usize_lossy(segments * bands.len());
    let mut d = T::zero();
    let mut g_ye = Array2::<T>::zeros(ye.dim());
    for m in SEGMENT..=frames {
        for j in 0..bands.len() {
            let xs: Vec<T> = (m - SEGMENT..m).map(|t| xe[[j, t]]).collect();
            let ys: Vec<T> = (m - SEGMENT..m).map(|t| ye[[j, t]]).collect();
            let terms = segment_correlation(&xs, &ys);
            d += terms.correlation;
            // dL/dr = −1/(J·M) since L = −mean(r).
            for (k, g) in segment_backward(&terms, &ys, -dr).into_iter().enumerate() {
                g_ye[[j, m - SEGMENT + k]] += g;
            }
        }
    }
    let value = -d * dr;

    // Envelope → framewise half-spectrum cotangent → windowed frame → signal.
    let inverse = planner.plan_fft_inverse(NFFT);
    let w = frame_window::<T>();
    let two = T::lit(2.0);
    let mut g_y = vec![T::zero(); y.len()];
    let mut buf = vec![Complex::new(T::zero(), T::zero()); NFFT];
    for (t, start) in frame_starts(y.len()).enumerate() {
        buf.iter_mut().for_each(|c| *c = Complex::new(T::zero(), T::zero()));
        let mut any = false;
        for (j, &(lo, hi)) in bands.iter().enumerate() {
            let env = ye[[j, t]];
            let g = g_ye[[j, t]];
            if env <= T::zero() || g == T::zero() {
                continue;
            }
            let g_power = g / (two * env);
            for k in lo..hi {
                buf[k] += y_spec[t][k] * (two * g_power);
                any = true;
            }
        }
        if !any {
            continue;
        }
        inverse.process(&mut buf);
        for n in 0..FRAME_LEN {
            g_y[start + n] += buf[n].re * w[n];
        }
    }
    let grad = match &filter {
        Some(f) => f.adjoint(&g_y, est.len()),
        None => g_y,
    };
    Ok((LossValue { value, components: vec![("stoi".into(), d * dr)] }, grad))
}
