use emoavse_tensor::Scalar;

use crate::error::{Error, Result};

/// Speech distortion index: error energy relative to reference energy,
/// `Σ(deg − ref)² / Σ ref²`. Lower is better; 0 for a perfect copy.
pub fn sdi_metric<T: Scalar>(reference: &[T], degraded: &[T]) -> Result<f64> {
    if reference.len() != degraded.len() {
        return Err(Error::shape(format!(
            "reference has {} samples, degraded {}",
            reference.len(),
            degraded.len()
        )));
    }
    let mut err = 0.0f64;
    let mut energy = 0.0f64;
    for (&r, &d) in reference.iter().zip(degraded) {
        let (r, d) = (r.as_f64(), d.as_f64());
        err += (d - r) * (d - r);
        energy += r * r;
    }
    if energy == 0.0 {
        return Err(Error::invalid("reference is silent; distortion index undefined"));
    }
    Ok(err / energy)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_and_double() {
        let x: Vec<f64> = (0..500).map(|i| (i as f64 * 0.37).sin()).collect();
        assert_eq!(sdi_metric(&x, &x).unwrap(), 0.0);
        let d: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        assert_eq!(sdi_metric(&x, &d).unwrap(), 1.0);
    }

    #[test]
    fn silent_reference_is_an_error() {
        assert!(sdi_metric(&[0.0f64; 4], &[1.0; 4]).is_err());
        assert!(sdi_metric(&[1.0f64; 4], &[1.0; 5]).is_err());
    }
}
