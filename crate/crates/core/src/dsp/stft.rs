use std::sync::Arc;

use emoavse_tensor::ndarray::{Array2, ArrayView2};
use emoavse_tensor::Scalar;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use super::waveform::Waveform;
use crate::error::{Error, Result};

/// Guard against division by a vanishing window-energy sum in overlap-add.
pub const OLA_EPSILON: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WindowKind {
    /// `0.5 - 0.5 cos(2πn/N)`, the DFT-even Hann window.
    #[default]
    HannPeriodic,
    /// `0.5 - 0.5 cos(2πn/(N-1))`.
    HannSymmetric,
    Rectangular,
}

impl WindowKind {
    pub fn build<T: Scalar>(self, len: usize) -> Vec<T> {
        let tau = 2.0 * std::f64::consts::PI;
        (0..len)
            .map(|n| {
                let v = match self {
                    WindowKind::HannPeriodic => 0.5 - 0.5 * (tau * n as f64 / len as f64).cos(),
                    WindowKind::HannSymmetric if len > 1 => {
                        0.5 - 0.5 * (tau * n as f64 / (len - 1) as f64).cos()
                    }
                    WindowKind::HannSymmetric | WindowKind::Rectangular => 1.0,
                };
                T::lit(v)
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StftParams {
    pub fft_size: usize,
    pub window_length: usize,
    pub hop_length: usize,
    pub window: WindowKind,
    pub center_pad: bool,
}

impl Default for StftParams {
    fn default() -> Self {
        Self {
            fft_size: 512,
            window_length: 400,
            hop_length: 160,
            window: WindowKind::HannPeriodic,
            center_pad: true,
        }
    }
}

impl StftParams {
    pub fn bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    pub fn pad(&self) -> usize {
        if self.center_pad {
            self.window_length / 2
        } else {
            0
        }
    }

    /// Number of frames for a signal of `len` samples.
    pub fn frames(&self, len: usize) -> Result<usize> {
        let padded = len + 2 * self.pad();
        if padded < self.window_length {
            return Err(Error::invalid(format!(
                "signal of {len} samples is shorter than one {}-sample window",
                self.window_length
            )));
        }
        Ok(1 + (padded - self.window_length) / self.hop_length)
    }

    /// Checks sizes and that overlapping squared windows never vanish, which is
    /// the condition weighted overlap-add inversion needs.
    pub fn validate(&self) -> Result<()> {
        if self.hop_length == 0 || self.hop_length > self.window_length || self.window_length > self.fft_size {
            return Err(Error::invalid(format!(
                "need 0 < hop ({}) <= window ({}) <= fft ({})",
                self.hop_length, self.window_length, self.fft_size
            )));
        }
        if !self.fft_size.is_multiple_of(2) {
            return Err(Error::invalid("fft_size must be even"));
        }
        let floor = self.overlap_energy().into_iter().fold(f64::INFINITY, f64::min);
        if floor < 1e-3 {
            return Err(Error::invalid(format!(
                "window {:?} with hop {} has vanishing overlap-add energy",
                self.window, self.hop_length
            )));
        }
        Ok(())
    }

    /// Σ_k w²[n + k·hop] over one hop period.
    pub fn overlap_energy(&self) -> Vec<f64> {
        self.overlap_sum(2)
    }

    /// Max relative deviation of Σ_k w[n + k·hop] from its mean; zero for a
    /// window that is strictly constant-overlap-add at this hop.
    pub fn cola_deviation(&self) -> f64 {
        let s = self.overlap_sum(1);
        let mean = s.iter().sum::<f64>() / s.len() as f64;
        s.iter().map(|v| (v - mean).abs() / mean).fold(0.0, f64::max)
    }

    fn overlap_sum(&self, power: i32) -> Vec<f64> {
        let w: Vec<f64> = self.window.build(self.window_length);
        (0..self.hop_length)
            .map(|n| {
                (n..self.window_length)
                    .step_by(self.hop_length)
                    .map(|i| w[i].powi(power))
                    .sum()
            })
            .collect()
    }
}

/// Magnitude and phase planes (bins × frames) with the transform that made them.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram<T> {
    pub magnitude: Array2<T>,
    pub phase: Array2<T>,
    pub params: StftParams,
    pub source_length: usize,
}

impl<T: Scalar> Spectrogram<T> {
    pub fn bins(&self) -> usize {
        self.magnitude.nrows()
    }

    pub fn frames(&self) -> usize {
        self.magnitude.ncols()
    }
}

/// Reusable analysis/synthesis plan for one parameter set.
pub struct StftPlan<T: Scalar> {
    params: StftParams,
    window: Vec<T>,
    forward: Arc<dyn Fft<T>>,
    inverse: Arc<dyn Fft<T>>,
}

impl<T: Scalar> StftPlan<T> {
    pub fn new(params: StftParams) -> Result<Self> {
        params.validate()?;
        let mut planner = FftPlanner::new();
        Ok(Self {
            window: params.window.build(params.window_length),
            forward: planner.plan_fft_forward(params.fft_size),
            inverse: planner.plan_fft_inverse(params.fft_size),
            params,
        })
    }

    pub fn params(&self) -> &StftParams {
        &self.params
    }

    fn padded(&self, x: &[T]) -> Vec<T> {
        let pad = self.params.pad();
        if pad == 0 {
            return x.to_vec();
        }
        let n = x.len();
        let mut out = Vec::with_capacity(n + 2 * pad);
        if n > pad {
            out.extend((1..=pad).rev().map(|i| x[i]));
            out.extend_from_slice(x);
            out.extend((0..pad).map(|i| x[n - 2 - i]));
        } else {
            out.resize(pad, T::zero());
            out.extend_from_slice(x);
            out.resize(n + 2 * pad, T::zero());
        }
        out
    }

    /// Complex spectrum, bins × frames.
    pub fn analyze(&self, x: &[T]) -> Result<Array2<Complex<T>>> {
        if x.is_empty() {
            return Err(Error::invalid("cannot transform an empty waveform"));
        }
        let p = &self.params;
        let frames = p.frames(x.len())?;
        let padded = self.padded(x);
        let bins = p.bins();
        let mut out = Array2::from_elem((bins, frames), Complex::new(T::zero(), T::zero()));
        let mut buf = vec![Complex::new(T::zero(), T::zero()); p.fft_size];
        for t in 0..frames {
            let start = t * p.hop_length;
            buf.iter_mut().for_each(|c| *c = Complex::new(T::zero(), T::zero()));
            for (n, (&s, &w)) in padded[start..start + p.window_length].iter().zip(&self.window).enumerate() {
                buf[n].re = s * w;
            }
            self.forward.process(&mut buf);
            for k in 0..bins {
                out[[k, t]] = buf[k];
            }
        }
        Ok(out)
    }

    pub fn stft(&self, w: &Waveform<T>) -> Result<Spectrogram<T>> {
        w.validate()?;
        let spec = self.analyze(&w.samples)?;
        let magnitude = spec.mapv(|c| c.norm());
        let phase = spec.mapv(|c| {
            let a = c.im.atan2(c.re);
            // (−π, π]: fold the −π branch onto +π.
            if a <= -T::PI() {
                T::PI()
            } else {
                a
            }
        });
        Ok(Spectrogram { magnitude, phase, params: self.params, source_length: w.len() })
    }

    fn check_planes(&self, mag: ArrayView2<T>, phase: ArrayView2<T>) -> Result<()> {
        if mag.dim() != phase.dim() {
            return Err(Error::shape(format!(
                "magnitude {:?} and phase {:?} differ",
                mag.dim(),
                phase.dim()
            )));
        }
        if mag.nrows() != self.params.bins() {
            return Err(Error::shape(format!(
                "expected {} frequency bins, got {}",
                self.params.bins(),
                mag.nrows()
            )));
        }
        if mag.ncols() == 0 {
            return Err(Error::shape("spectrogram has no frames"));
        }
        Ok(())
    }

    /// Per-sample overlap-add normaliser over the padded signal.
    fn ola_norm(&self, frames: usize) -> Vec<T> {
        let p = &self.params;
        let len = (frames - 1) * p.hop_length + p.window_length;
        let mut norm = vec![T::zero(); len];
        for t in 0..frames {
            for (n, &w) in self.window.iter().enumerate() {
                norm[t * p.hop_length + n] += w * w;
            }
        }
        let eps = T::lit(OLA_EPSILON);
        norm.iter_mut().for_each(|v| *v = v.max(eps));
        norm
    }

    /// Weighted overlap-add inverse of a magnitude/phase pair, trimmed or
    /// zero-padded to exactly `target_length` samples.
    pub fn istft(&self, mag: ArrayView2<T>, phase: ArrayView2<T>, target_length: usize) -> Result<Vec<T>> {
        self.check_planes(mag, phase)?;
        let p = &self.params;
        let (bins, frames) = mag.dim();
        let n_fft = p.fft_size;
        let scale = T::one() / T::from_usize_lossy(n_fft);
        let norm = self.ola_norm(frames);
        let mut acc = vec![T::zero(); norm.len()];
        let mut buf = vec![Complex::new(T::zero(), T::zero()); n_fft];
        for t in 0..frames {
            for k in 0..bins {
                let c = Complex::from_polar(mag[[k, t]], phase[[k, t]]);
                buf[k] = c;
                if k > 0 && k < n_fft - k {
                    buf[n_fft - k] = c.conj();
                }
            }
            self.inverse.process(&mut buf);
            let start = t * p.hop_length;
            for (n, &w) in self.window.iter().enumerate() {
                acc[start + n] += buf[n].re * scale * w;
            }
        }
        let pad = p.pad();
        Ok((0..target_length)
            .map(|i| {
                let j = i + pad;
                if j < acc.len() {
                    acc[j] / norm[j]
                } else {
                    T::zero()
                }
            })
            .collect())
    }

    /// Gradient of `<g, istft(mag, phase)>` with respect to `mag` (phase held fixed).
    pub fn istft_adjoint(&self, g: &[T], phase: ArrayView2<T>) -> Result<Array2<T>> {
        self.check_planes(phase, phase)?;
        let p = &self.params;
        let (bins, frames) = phase.dim();
        let n_fft = p.fft_size;
        let norm = self.ola_norm(frames);
        let pad = p.pad();
        let mut gp = vec![T::zero(); norm.len()];
        for (i, &gi) in g.iter().enumerate() {
            if let Some(slot) = gp.get_mut(i + pad) {
                *slot = gi / norm[i + pad];
            }
        }
        let scale = T::one() / T::from_usize_lossy(n_fft);
        let two = T::lit(2.0);
        let mut out = Array2::zeros((bins, frames));
        let mut buf = vec![Complex::new(T::zero(), T::zero()); n_fft];
        for t in 0..frames {
            buf.iter_mut().for_each(|c| *c = Complex::new(T::zero(), T::zero()));
            let start = t * p.hop_length;
            for (n, &w) in self.window.iter().enumerate() {
                buf[n].re = gp[start + n] * w;
            }
            self.forward.process(&mut buf);
            for k in 0..bins {
                let weight = if k == 0 || 2 * k == n_fft { T::one() } else { two };
                let rot = Complex::from_polar(T::one(), phase[[k, t]]);
                out[[k, t]] = weight * scale * (rot * buf[k].conj()).re;
            }
        }
        Ok(out)
    }
}

/// Short-time Fourier transform of `w`.
pub fn stft<T: Scalar>(w: &Waveform<T>, params: &StftParams) -> Result<Spectrogram<T>> {
    StftPlan::new(*params)?.stft(w)
}

/// Inverse transform of a magnitude/phase pair at the given sample rate.
pub fn istft<T: Scalar>(
    mag: ArrayView2<T>,
    phase: ArrayView2<T>,
    params: &StftParams,
    target_length: usize,
    sample_rate: u32,
) -> Result<Waveform<T>> {
    let samples = StftPlan::new(*params)?.istft(mag, phase, target_length)?;
    Ok(Waveform { samples, sample_rate })
}

/// Resynthesises an enhanced magnitude with the phase of the noisy input.
pub fn mixed_phase_resynthesis<T: Scalar>(
    enhanced_mag: ArrayView2<T>,
    noisy: &Spectrogram<T>,
    target_length: usize,
    sample_rate: u32,
) -> Result<Waveform<T>> {
    if enhanced_mag.dim() != noisy.phase.dim() {
        return Err(Error::shape(format!(
            "enhanced magnitude {:?} vs noisy phase {:?}",
            enhanced_mag.dim(),
            noisy.phase.dim()
        )));
    }
    istft(enhanced_mag, noisy.phase.view(), &noisy.params, target_length, sample_rate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(len: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..len).map(|_| rng.random_range(-0.5..0.5)).collect()
    }

    #[test]
    fn frame_count_for_four_seconds() {
        let p = StftParams::default();
        assert_eq!(p.frames(64_000).unwrap(), 1 + (64_000 + 2 * 200 - 400) / 160);
        let w = Waveform::new(noise(64_000, 1), 16_000).unwrap();
        let s = stft(&w, &p).unwrap();
        assert_eq!(s.magnitude.dim(), (257, 401));
    }

    #[test]
    fn uncentred_short_signal_is_an_error() {
        let p = StftParams { center_pad: false, ..Default::default() };
        let w = Waveform::new(vec![0.1f64; 399], 16_000).unwrap();
        assert!(stft(&w, &p).is_err());
        let w = Waveform::new(vec![0.1f64; 400], 16_000).unwrap();
        assert_eq!(stft(&w, &p).unwrap().frames(), 1);
    }

    #[test]
    fn zeros_give_zero_magnitude() {
        let w = Waveform::new(vec![0.0f64; 8000], 16_000).unwrap();
        let s = stft(&w, &StftParams::default()).unwrap();
        assert!(s.magnitude.iter().all(|&m| m == 0.0));
    }

    #[test]
    fn sine_peaks_at_bin_32_and_matches_direct_dft() {
        let p = StftParams::default();
        let x: Vec<f64> = (0..16_000)
            .map(|n| (2.0 * std::f64::consts::PI * 1000.0 * n as f64 / 16_000.0).sin())
            .collect();
        let s = stft(&Waveform::new(x.clone(), 16_000).unwrap(), &p).unwrap();
        for t in 2..s.frames() - 2 {
            let col = s.magnitude.column(t);
            let argmax = (0..col.len()).max_by(|&a, &b| col[a].total_cmp(&col[b])).unwrap();
            assert_eq!(argmax, 32);
        }
        // Direct DFT of frame 10 (interior, so no padding is involved).
        let w: Vec<f64> = WindowKind::HannPeriodic.build(400);
        let start = 10 * 160 - 200;
        for k in [0usize, 31, 32, 33, 100, 256] {
            let (mut re, mut im) = (0.0, 0.0);
            for n in 0..400 {
                let a = -2.0 * std::f64::consts::PI * (k * n) as f64 / 512.0;
                re += x[start + n] * w[n] * a.cos();
                im += x[start + n] * w[n] * a.sin();
            }
            assert!((s.magnitude[[k, 10]] - re.hypot(im)).abs() < 1e-9);
        }
    }

    #[test]
    fn phase_lies_in_half_open_interval() {
        let w = Waveform::new(noise(4000, 3), 16_000).unwrap();
        let s = stft(&w, &StftParams::default()).unwrap();
        let pi = std::f64::consts::PI;
        assert!(s.phase.iter().all(|&a| a > -pi && a <= pi));
        // DC of a negative constant has phase exactly π.
        let w = Waveform::new(vec![-0.25f64; 4000], 16_000).unwrap();
        let s = stft(&w, &StftParams::default()).unwrap();
        assert_eq!(s.phase[[0, 5]], pi);
    }

    #[test]
    fn round_trip_f64_and_f32() {
        let p = StftParams::default();
        let x = noise(16_000, 4);
        let w = Waveform::new(x.clone(), 16_000).unwrap();
        let s = stft(&w, &p).unwrap();
        let y = istft(s.magnitude.view(), s.phase.view(), &p, x.len(), 16_000).unwrap();
        let err = x.iter().zip(&y.samples).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-12, "{err}");

        let w32 = w.cast::<f32>();
        let s = stft(&w32, &p).unwrap();
        let y = istft(s.magnitude.view(), s.phase.view(), &p, x.len(), 16_000).unwrap();
        let err = w32.samples.iter().zip(&y.samples).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
        assert!(err < 1e-3, "{err}");
    }

    #[test]
    fn istft_length_contract_and_zero_magnitude() {
        let p = StftParams::default();
        let a = stft(&Waveform::new(noise(8000, 5), 16_000).unwrap(), &p).unwrap();
        let b = stft(&Waveform::new(noise(8000, 6), 16_000).unwrap(), &p).unwrap();
        for target in [7000, 8000, 9000] {
            let y = istft(a.magnitude.view(), b.phase.view(), &p, target, 16_000).unwrap();
            assert_eq!(y.len(), target);
        }
        let zeros = Array2::<f64>::zeros(a.magnitude.dim());
        let y = istft(zeros.view(), b.phase.view(), &p, 8000, 16_000).unwrap();
        assert!(y.samples.iter().all(|&v| v == 0.0));
        let bad = Array2::<f64>::zeros((257, 3));
        assert!(istft(a.magnitude.view(), bad.view(), &p, 8000, 16_000).is_err());
    }

    #[test]
    fn mixed_phase_identity_and_silence() {
        let p = StftParams::default();
        let x = noise(12_000, 7);
        let s = stft(&Waveform::new(x.clone(), 16_000).unwrap(), &p).unwrap();
        let y = mixed_phase_resynthesis(s.magnitude.view(), &s, x.len(), 16_000).unwrap();
        assert!(x.iter().zip(&y.samples).all(|(a, b)| (a - b).abs() < 1e-6));
        let z = Array2::zeros(s.magnitude.dim());
        let y = mixed_phase_resynthesis(z.view(), &s, x.len(), 16_000).unwrap();
        assert!(y.samples.iter().all(|&v| v == 0.0));
        let wrong = Array2::zeros((257, 2));
        assert!(mixed_phase_resynthesis(wrong.view(), &s, x.len(), 16_000).is_err());
    }

    #[test]
    fn frame_energy_matches_spectral_energy() {
        let p = StftParams::default();
        let plan = StftPlan::<f64>::new(p).unwrap();
        let x = noise(6000, 8);
        let spec = plan.analyze(&x).unwrap();
        let w: Vec<f64> = p.window.build(400);
        let padded = plan.padded(&x);
        for t in 0..spec.ncols() {
            let frame_energy: f64 = (0..400).map(|n| (padded[t * 160 + n] * w[n]).powi(2)).sum();
            let spectral: f64 = (0..257)
                .map(|k| {
                    let c = if k == 0 || k == 256 { 1.0 } else { 2.0 };
                    c * spec[[k, t]].norm_sqr()
                })
                .sum::<f64>()
                / 512.0;
            assert!((frame_energy - spectral).abs() <= 1e-6 * frame_energy.max(1e-12));
        }
    }

    #[test]
    fn adjoint_matches_inner_product() {
        let p = StftParams::default();
        let plan = StftPlan::<f64>::new(p).unwrap();
        let s = plan.stft(&Waveform::new(noise(5000, 9), 16_000).unwrap()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let m = Array2::from_shape_fn(s.magnitude.dim(), |_| rng.random_range(0.0..1.0));
        let g: Vec<f64> = (0..5000).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y = plan.istft(m.view(), s.phase.view(), 5000).unwrap();
        let lhs: f64 = y.iter().zip(&g).map(|(a, b)| a * b).sum();
        let gm = plan.istft_adjoint(&g, s.phase.view()).unwrap();
        let rhs: f64 = (&gm * &m).sum();
        assert!((lhs - rhs).abs() < 1e-9 * lhs.abs().max(1.0));
    }

    #[test]
    fn default_window_is_nola_but_not_strictly_cola() {
        let p = StftParams::default();
        assert!(p.validate().is_ok());
        assert!(p.cola_deviation() > 1e-3);
        let half = StftParams { hop_length: 200, ..p };
        assert!(half.cola_deviation() < 1e-12);
        let bad = StftParams { hop_length: 0, ..p };
        assert!(bad.validate().is_err());
        let rect_gap = StftParams { window: WindowKind::HannSymmetric, hop_length: 399, ..p };
        assert!(rect_gap.validate().is_err());
    }

    #[test]
    fn stft_is_bitwise_deterministic() {
        let w = Waveform::new(noise(9000, 11), 16_000).unwrap();
        let a = stft(&w, &StftParams::default()).unwrap();
        let b = stft(&w, &StftParams::default()).unwrap();
        assert_eq!(a, b);
    }
}
