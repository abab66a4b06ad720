//! Modulation-domain loss: compares log temporal envelopes of an auditory
//! (gammatone) filterbank.
//!
//! est → 4th-order gammatone FIR bank on the ERB-rate scale → analytic-signal
//! magnitude → 30 Hz Hann low-pass → `log(· + floor)` → mean squared
//! difference against the same pipeline applied to the reference.

use std::sync::Arc;

use emoavse_tensor::Scalar;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use super::LossValue;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModulationConfig {
    pub bands: usize,
    pub f_min: f64,
    pub f_max: f64,
    /// −3 dB point of the envelope low-pass, Hz.
    pub envelope_cutoff: f64,
    /// Gammatone impulse-response length, seconds.
    pub filter_seconds: f64,
    /// Added inside the logarithm.
    pub log_floor: f64,
    /// Added to |z|² before the square root, keeping the envelope smooth.
    pub envelope_delta: f64,
}

impl Default for ModulationConfig {
    fn default() -> Self {
        Self {
            bands: 20,
            f_min: 100.0,
            f_max: 8000.0,
            envelope_cutoff: 30.0,
            filter_seconds: 0.128,
            log_floor: 1e-5,
            envelope_delta: 1e-10,
        }
    }
}

fn erb_rate(f: f64) -> f64 {
    21.4 * (1.0 + 0.00437 * f).log10()
}

fn inverse_erb_rate(e: f64) -> f64 {
    (10f64.powf(e / 21.4) - 1.0) / 0.00437
}

/// Equivalent rectangular bandwidth (Glasberg & Moore), Hz.
pub fn erb(f: f64) -> f64 {
    24.7 * (4.37 * f / 1000.0 + 1.0)
}

/// Centre frequencies equally spaced on the ERB-rate scale.
pub fn erb_space(f_min: f64, f_max: f64, n: usize) -> Vec<f64> {
    let (a, b) = (erb_rate(f_min), erb_rate(f_max));
    (0..n)
        .map(|i| {
            let u = if n == 1 { 0.0 } else { i as f64 / (n - 1) as f64 };
            inverse_erb_rate(a + (b - a) * u)
        })
        .collect()
}

/// Unit-peak-gain 4th-order gammatone impulse response.
pub fn gammatone(fc: f64, fs: f64, len: usize) -> Vec<f64> {
    let b = 1.019 * erb(fc);
    let tau = 2.0 * std::f64::consts::PI;
    let h: Vec<f64> = (0..len)
        .map(|n| {
            let t = n as f64 / fs;
            t.powi(3) * (-tau * b * t).exp() * (tau * fc * t).cos()
        })
        .collect();
    let w = tau * fc / fs;
    let (re, im) = h
        .iter()
        .enumerate()
        .fold((0.0, 0.0), |(re, im), (n, &v)| (re + v * (w * n as f64).cos(), im - v * (w * n as f64).sin()));
    let gain = re.hypot(im);
    h.into_iter().map(|v| v / gain).collect()
}

/// Linear convolution with a fixed kernel via zero-padded FFTs.
struct Convolver<T: Scalar> {
    kernel_len: usize,
    signal_len: usize,
    kernel_fft: Vec<Complex<T>>,
    forward: Arc<dyn Fft<T>>,
    inverse: Arc<dyn Fft<T>>,
}

impl<T: Scalar> Convolver<T> {
    fn new(kernel: &[f64], signal_len: usize, planner: &mut FftPlanner<T>) -> Self {
        let n = (signal_len + kernel.len()).next_power_of_two();
        let forward = planner.plan_fft_forward(n);
        let inverse = planner.plan_fft_inverse(n);
        let mut kernel_fft = vec![Complex::new(T::zero(), T::zero()); n];
        for (slot, &k) in kernel_fft.iter_mut().zip(kernel) {
            slot.re = T::lit(k);
        }
        forward.process(&mut kernel_fft);
        Self { kernel_len: kernel.len(), signal_len, kernel_fft, forward, inverse }
    }

    fn run(&self, x: &[T], conj: bool, offset: usize) -> Vec<T> {
        let n = self.kernel_fft.len();
        let mut buf = vec![Complex::new(T::zero(), T::zero()); n];
        for (slot, &v) in buf.iter_mut().zip(x) {
            slot.re = v;
        }
        self.forward.process(&mut buf);
        for (b, k) in buf.iter_mut().zip(&self.kernel_fft) {
            *b *= if conj { k.conj() } else { *k };
        }
        self.inverse.process(&mut buf);
        let scale = T::one() / T::from_usize_lossy(n);
        buf[offset..offset + self.signal_len].iter().map(|c| c.re * scale).collect()
    }

    /// `y[n] = Σ_k h[k] x[n − k]`, first `signal_len` samples.
    fn causal(&self, x: &[T]) -> Vec<T> {
        self.run(x, false, 0)
    }

    /// Transpose of [`causal`](Self::causal).
    fn causal_adjoint(&self, g: &[T]) -> Vec<T> {
        self.run(g, true, 0)
    }

    /// Centred ("same") convolution with an odd, symmetric kernel; self-adjoint.
    fn centred(&self, x: &[T]) -> Vec<T> {
        self.run(x, false, self.kernel_len / 2)
    }
}

/// Precomputed filterbank for one signal length and rate.
pub struct ModulationLoss<T: Scalar> {
    config: ModulationConfig,
    len: usize,
    bank: Vec<Convolver<T>>,
    lowpass: Convolver<T>,
    hilbert_fwd: Arc<dyn Fft<T>>,
    hilbert_inv: Arc<dyn Fft<T>>,
}

struct BandState<T> {
    z: Vec<Complex<T>>,
    env: Vec<T>,
    smooth: Vec<T>,
}

impl<T: Scalar> ModulationLoss<T> {
    pub fn new(config: ModulationConfig, fs: usize, len: usize) -> Result<Self> {
        if config.bands == 0 || config.f_min <= 0.0 || config.f_max <= config.f_min {
            return Err(Error::Config(format!("invalid modulation filterbank {config:?}")));
        }
        if config.f_max > fs as f64 / 2.0 + 1e-9 {
            return Err(Error::Config(format!(
                "modulation f_max {} exceeds Nyquist at {fs} Hz",
                config.f_max
            )));
        }
        if len < 2 {
            return Err(Error::invalid("signal too short for the modulation loss"));
        }
        let mut planner = FftPlanner::new();
        let taps = ((config.filter_seconds * fs as f64).round() as usize).max(1);
        let bank = erb_space(config.f_min, config.f_max, config.bands)
            .into_iter()
            .map(|fc| Convolver::new(&gammatone(fc, fs as f64, taps), len, &mut planner))
            .collect();
        let half = ((0.72 * fs as f64 / config.envelope_cutoff) / 2.0).round() as usize;
        let klen = 2 * half + 1;
        let raw: Vec<f64> = (0..klen)
            .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * (n + 1) as f64 / (klen + 1) as f64).cos())
            .collect();
        let sum: f64 = raw.iter().sum();
        let kernel: Vec<f64> = raw.iter().map(|v| v / sum).collect();
        let lowpass = Convolver::new(&kernel, len, &mut planner);
        Ok(Self {
            config,
            len,
            bank,
            lowpass,
            hilbert_fwd: planner.plan_fft_forward(len),
            hilbert_inv: planner.plan_fft_inverse(len),
        })
    }

    fn analytic_mask(&self, k: usize) -> T {
        let n = self.len;
        if k == 0 || (n.is_multiple_of(2) && k == n / 2) {
            T::one()
        } else if k < n.div_ceil(2) {
            T::lit(2.0)
        } else {
            T::zero()
        }
    }

    /// `IFFT(D · FFT(v))`, the analytic-signal operator.
    fn analytic(&self, v: Vec<Complex<T>>) -> Vec<Complex<T>> {
        let mut buf = v;
        self.hilbert_fwd.process(&mut buf);
        for (k, b) in buf.iter_mut().enumerate() {
            *b *= self.analytic_mask(k);
        }
        self.hilbert_inv.process(&mut buf);
        let scale = T::one() / T::from_usize_lossy(self.len);
        buf.iter_mut().for_each(|b| *b *= scale);
        buf
    }

    fn band(&self, b: usize, x: &[T]) -> BandState<T> {
        let u = self.bank[b].causal(x);
        let z = self.analytic(u.iter().map(|&v| Complex::new(v, T::zero())).collect());
        let delta = T::lit(self.config.envelope_delta);
        let env: Vec<T> = z.iter().map(|c| (c.norm_sqr() + delta).sqrt()).collect();
        let smooth = self.lowpass.centred(&env);
        BandState { z, env, smooth }
    }

    /// Log envelopes (bands × samples) of one signal.
    pub fn log_envelopes(&self, x: &[T]) -> Vec<Vec<T>> {
        let floor = T::lit(self.config.log_floor);
        (0..self.bank.len())
            .map(|b| self.band(b, x).smooth.iter().map(|&v| (v + floor).ln()).collect())
            .collect()
    }

    pub fn evaluate(&self, est: &[T], reference: &[T]) -> Result<(LossValue<T>, Vec<T>)> {
        if est.len() != self.len || reference.len() != self.len {
            return Err(Error::shape(format!(
                "modulation loss planned for {} samples, got {} and {}",
                self.len,
                est.len(),
                reference.len()
            )));
        }
        let floor = T::lit(self.config.log_floor);
        let count = T::from_usize_lossy(self.bank.len() * self.len);
        let two = T::lit(2.0);
        let mut total = T::zero();
        let mut grad = vec![T::zero(); self.len];
        for b in 0..self.bank.len() {
            let ys = self.band(b, est);
            let xs = self.band(b, reference);
            let mut g_smooth = vec![T::zero(); self.len];
            for n in 0..self.len {
                let ly = ys.smooth[n] + floor;
                let diff = ly.ln() - (xs.smooth[n] + floor).ln();
                total += diff * diff;
                g_smooth[n] = two * diff / (ly * count);
            }
            let g_env = self.lowpass.centred(&g_smooth);
            let g_z: Vec<Complex<T>> = ys
                .z
                .iter()
                .zip(&ys.env)
                .zip(&g_env)
                .map(|((z, &e), &g)| *z * (g / e))
                .collect();
            let g_u: Vec<T> = self.analytic(g_z).iter().map(|c| c.re).collect();
            for (acc, g) in grad.iter_mut().zip(self.bank[b].causal_adjoint(&g_u)) {
                *acc += g;
            }
        }
        Ok((LossValue::scalar(total / count), grad))
    }
}

/// One-shot modulation loss with the default filterbank.
pub fn modulation_loss<T: Scalar>(est: &[T], reference: &[T], fs: usize) -> Result<(LossValue<T>, Vec<T>)> {
    if est.len() != reference.len() {
        return Err(Error::shape(format!(
            "estimate has {} samples, reference {}",
            est.len(),
            reference.len()
        )));
    }
    ModulationLoss::new(ModulationConfig::default(), fs, est.len())?.evaluate(est, reference)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn erb_spacing_spans_the_range() {
        let f = erb_space(100.0, 8000.0, 20);
        assert!((f[0] - 100.0).abs() < 1e-9 && (f[19] - 8000.0).abs() < 1e-6);
        assert!(f.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn gammatone_has_unit_gain_at_centre() {
        let h = gammatone(1000.0, 16_000.0, 2048);
        let w = 2.0 * std::f64::consts::PI * 1000.0 / 16_000.0;
        let (re, im) = h.iter().enumerate().fold((0.0, 0.0), |(a, b), (n, &v)| {
            (a + v * (w * n as f64).cos(), b - v * (w * n as f64).sin())
        });
        assert!((re.hypot(im) - 1.0).abs() < 1e-12);
        // And attenuates an octave away.
        let w2 = 2.0 * w;
        let (re, im) = h.iter().enumerate().fold((0.0, 0.0), |(a, b), (n, &v)| {
            (a + v * (w2 * n as f64).cos(), b - v * (w2 * n as f64).sin())
        });
        assert!(re.hypot(im) < 0.1);
    }

    #[test]
    fn identical_inputs_give_zero() {
        let x: Vec<f64> = (0..8000).map(|n| (n as f64 * 0.05).sin() * (n as f64 * 0.001).sin()).collect();
        let (l, g) = modulation_loss(&x, &x, 16_000).unwrap();
        assert_eq!(l.value, 0.0);
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn convolver_adjoint_identity() {
        let mut planner = FftPlanner::new();
        let h: Vec<f64> = (0..37).map(|i| ((i * 7 % 11) as f64) - 5.0).collect();
        let c = Convolver::<f64>::new(&h, 300, &mut planner);
        let x: Vec<f64> = (0..300).map(|i| ((i * 13 % 17) as f64) - 8.0).collect();
        let g: Vec<f64> = (0..300).map(|i| ((i * 5 % 23) as f64) - 11.0).collect();
        let y = c.causal(&x);
        // Direct causal convolution.
        for n in [0usize, 10, 36, 150, 299] {
            let d: f64 = (0..=n.min(36)).map(|k| h[k] * x[n - k]).sum();
            assert!((y[n] - d).abs() < 1e-8);
        }
        let lhs: f64 = y.iter().zip(&g).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(c.causal_adjoint(&g)).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-6 * lhs.abs());
    }

    #[test]
    fn rejects_bad_configs() {
        let cfg = ModulationConfig { f_max: 9000.0, ..Default::default() };
        assert!(ModulationLoss::<f64>::new(cfg, 16_000, 100).is_err());
        assert!(modulation_loss(&[0.0f64; 10], &[0.0; 11], 16_000).is_err());
    }
}
