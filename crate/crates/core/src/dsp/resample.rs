//! Rational-rate resampling with a Kaiser-windowed sinc anti-aliasing filter.
//!
//! The filter design follows the classic Octave `resample` recipe (60 dB
//! rejection, roll-off one tenth of the cutoff), normalised to unit DC gain per
//! output phase, and the filter is centred so output sample `m` sits at input
//! time `m * q / p`.

use emoavse_tensor::Scalar;

pub fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Zeroth-order modified Bessel function of the first kind (power series).
pub fn bessel_i0(x: f64) -> f64 {
    let q = x * x / 4.0;
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..500 {
        term *= q / (k as f64 * k as f64);
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

pub fn kaiser(len: usize, beta: f64) -> Vec<f64> {
    if len == 1 {
        return vec![1.0];
    }
    let denom = bessel_i0(beta);
    (0..len)
        .map(|n| {
            let r = 2.0 * n as f64 / (len - 1) as f64 - 1.0;
            bessel_i0(beta * (1.0 - r * r).max(0.0).sqrt()) / denom
        })
        .collect()
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

/// Polyphase filter for a `p/q` rate change (reduced), already scaled by `p`.
#[derive(Clone, Debug)]
pub struct ResampleFilter {
    pub up: usize,
    pub down: usize,
    pub taps: Vec<f64>,
}

impl ResampleFilter {
    pub fn new(up: usize, down: usize) -> Self {
        assert!(up > 0 && down > 0, "resampling factors must be positive");
        let g = gcd(up, down);
        let (p, q) = (up / g, down / g);
        let rejection_db = 60.0;
        let cutoff = 1.0 / (2.0 * p.max(q) as f64);
        let roll_off = cutoff / 10.0;
        let half = ((rejection_db - 8.0) / (28.714 * roll_off)).ceil() as i64;
        let beta = 0.1102 * (rejection_db - 8.7);
        let window = kaiser((2 * half + 1) as usize, beta);
        let mut taps: Vec<f64> = (-half..=half)
            .zip(&window)
            .map(|(t, w)| w * 2.0 * p as f64 * cutoff * sinc(2.0 * cutoff * t as f64))
            .collect();
        let sum: f64 = taps.iter().sum();
        for t in &mut taps {
            *t = *t / sum * p as f64;
        }
        Self { up: p, down: q, taps }
    }

    pub fn half_len(&self) -> usize {
        (self.taps.len() - 1) / 2
    }

    pub fn output_len(&self, input_len: usize) -> usize {
        (input_len * self.up).div_ceil(self.down)
    }

    /// Input index range contributing to output `m`, with the tap offset base.
    #[inline]
    fn support(&self, m: usize, input_len: usize) -> (usize, usize, i64) {
        let centre = (m * self.down + self.half_len()) as i64;
        let lh = self.taps.len() as i64;
        let p = self.up as i64;
        // tap index = centre - n*p must lie in [0, lh)
        let lo = ((centre - lh + 1).max(0) + p - 1) / p;
        let hi = (centre / p).min(input_len as i64 - 1);
        (lo as usize, (hi + 1).max(lo) as usize, centre)
    }

    pub fn apply<T: Scalar>(&self, x: &[T]) -> Vec<T> {
        let taps: Vec<T> = self.taps.iter().map(|&t| T::lit(t)).collect();
        let p = self.up as i64;
        (0..self.output_len(x.len()))
            .map(|m| {
                let (lo, hi, centre) = self.support(m, x.len());
                (lo..hi).fold(T::zero(), |acc, n| acc + x[n] * taps[(centre - n as i64 * p) as usize])
            })
            .collect()
    }

    /// Transpose of [`apply`](Self::apply): maps an output-domain gradient back
    /// onto the input samples.
    pub fn adjoint<T: Scalar>(&self, g: &[T], input_len: usize) -> Vec<T> {
        let taps: Vec<T> = self.taps.iter().map(|&t| T::lit(t)).collect();
        let p = self.up as i64;
        let mut out = vec![T::zero(); input_len];
        for (m, &gm) in g.iter().enumerate() {
            let (lo, hi, centre) = self.support(m, input_len);
            for n in lo..hi {
                out[n] += gm * taps[(centre - n as i64 * p) as usize];
            }
        }
        out
    }
}

/// Resamples `x` by the rational factor `up / down`.
pub fn resample_poly<T: Scalar>(x: &[T], up: usize, down: usize) -> Vec<T> {
    let f = ResampleFilter::new(up, down);
    if f.up == f.down {
        return x.to_vec();
    }
    f.apply(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bessel_matches_known_values() {
        // Reference values of I0 from standard tables.
        assert!((bessel_i0(0.0) - 1.0).abs() < 1e-15);
        assert!((bessel_i0(1.0) - 1.266_065_877_752_008_4).abs() < 1e-14);
        assert!((bessel_i0(5.0) - 27.239_871_823_604_45).abs() < 1e-11);
    }

    #[test]
    fn filter_design_for_16k_to_10k() {
        let f = ResampleFilter::new(10_000, 16_000);
        assert_eq!((f.up, f.down), (5, 8));
        assert_eq!(f.half_len(), 290);
        let s: f64 = f.taps.iter().sum();
        assert!((s - 5.0).abs() < 1e-12);
    }

    #[test]
    fn output_length_rounds_up() {
        let f = ResampleFilter::new(10_000, 16_000);
        assert_eq!(f.output_len(16_000), 10_000);
        assert_eq!(f.output_len(16_001), 10_001);
    }

    #[test]
    fn dc_is_preserved_in_the_interior() {
        let x = vec![1.0f64; 4000];
        let y = resample_poly(&x, 5, 8);
        for v in &y[300..y.len() - 300] {
            assert!((v - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn adjoint_identity() {
        let f = ResampleFilter::new(5, 8);
        let x: Vec<f64> = (0..997).map(|i| ((i * 37 % 101) as f64 / 50.0) - 1.0).collect();
        let y = f.apply(&x);
        let g: Vec<f64> = (0..y.len()).map(|i| ((i * 13 % 71) as f64 / 35.0) - 1.0).collect();
        let lhs: f64 = y.iter().zip(&g).map(|(a, b)| a * b).sum();
        let xt = f.adjoint(&g, x.len());
        let rhs: f64 = x.iter().zip(&xt).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9 * lhs.abs().max(1.0));
    }

    #[test]
    fn sine_survives_downsampling() {
        let x: Vec<f64> = (0..16_000)
            .map(|n| (2.0 * std::f64::consts::PI * 440.0 * n as f64 / 16_000.0).sin())
            .collect();
        let y = resample_poly(&x, 10_000, 16_000);
        for (m, v) in y.iter().enumerate().skip(400).take(9000) {
            let t = m as f64 / 10_000.0;
            assert!((v - (2.0 * std::f64::consts::PI * 440.0 * t).sin()).abs() < 2e-3);
        }
    }
}
