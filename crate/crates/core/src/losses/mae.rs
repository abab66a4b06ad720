use emoavse_tensor::ndarray::{ArrayD, ArrayViewD};
use emoavse_tensor::Scalar;

use super::LossValue;
use crate::error::{Error, Result};

/// Mean absolute difference and its (sub)gradient `sign(est − ref) / n`.
pub fn mae_loss<T: Scalar>(est: ArrayViewD<T>, reference: ArrayViewD<T>) -> Result<(LossValue<T>, ArrayD<T>)> {
    if est.shape() != reference.shape() {
        return Err(Error::shape(format!(
            "estimate {:?} vs reference {:?}",
            est.shape(),
            reference.shape()
        )));
    }
    if est.is_empty() {
        return Err(Error::invalid("empty operands"));
    }
    let n = T::from_usize_lossy(est.len());
    let diff = &est - &reference;
    let value = diff.iter().map(|d| d.abs()).sum::<T>() / n;
    let grad = diff.mapv(|d| {
        if d > T::zero() {
            T::one() / n
        } else if d < T::zero() {
            -T::one() / n
        } else {
            T::zero()
        }
    });
    Ok((LossValue::scalar(value), grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use emoavse_tensor::ndarray::{Array2, IxDyn};

    #[test]
    fn equal_and_offset_inputs() {
        let a = Array2::from_shape_fn((4, 5), |(i, j)| (i * 5 + j) as f64 * 0.1).into_dyn();
        assert_eq!(mae_loss(a.view(), a.view()).unwrap().0.value, 0.0);
        let b = a.mapv(|v| v + 0.5);
        assert!((mae_loss(b.view(), a.view()).unwrap().0.value - 0.5).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch() {
        let a = ArrayD::<f64>::zeros(IxDyn(&[2, 3]));
        let b = ArrayD::<f64>::zeros(IxDyn(&[3, 2]));
        assert!(mae_loss(a.view(), b.view()).is_err());
    }
}
