//! Central finite differences, the oracle every backward rule is checked against.

use crate::element::Element;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-3;
pub const DEFAULT_REL_TOL: f64 = 1e-3;

/// `|a - b| / max(|a|, |b|, 1e-6)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Central-difference derivative of `f` at `x` along coordinate `k`, accumulated in `f64`.
pub fn finite_diff_at<T, F>(f: &mut F, x: &Tensor<T>, k: usize, step: f64) -> Result<f64>
where
    T: Element,
    F: FnMut(&Tensor<T>) -> Result<T>,
{
    if step.is_nan() || step <= 0.0 {
        return Err(Error::InvalidConfig(format!("finite-difference step must be positive, got {step}")));
    }
    let mut probe = x.clone();
    let orig = probe.data()[k];
    let h = T::from_f64_lossy(step);
    probe.data_mut()[k] = orig + h;
    let plus = f(&probe)?.as_f64();
    probe.data_mut()[k] = orig - h;
    let minus = f(&probe)?.as_f64();
    if !plus.is_finite() || !minus.is_finite() {
        return Err(Error::NumericOverflow(format!("f evaluated to {plus} / {minus} around coordinate {k}")));
    }
    // divide by the step actually taken after rounding to T
    let taken = (orig + h).as_f64() - (orig - h).as_f64();
    Ok((plus - minus) / taken)
}

/// Central-difference gradient of a scalar function of one tensor.
pub fn finite_diff_grad<T, F>(mut f: F, x: &Tensor<T>, step: f64) -> Result<Vec<f64>>
where
    T: Element,
    F: FnMut(&Tensor<T>) -> Result<T>,
{
    (0..x.numel()).map(|k| finite_diff_at(&mut f, x, k, step)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::sigmoid_scalar;

    #[test]
    fn linear_is_exact() {
        let x = Tensor::<f64>::new(vec![2], vec![5.0, 7.0]).unwrap();
        let g = finite_diff_grad(|t| Ok(t.sum()), &x, 1e-3).unwrap();
        for v in g {
            assert!((v - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn quadratic() {
        let x = Tensor::<f64>::new(vec![1], vec![3.0]).unwrap();
        let g = finite_diff_grad(|t| Ok(t.data().iter().map(|v| v * v).sum()), &x, 1e-3).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-5);
    }

    #[test]
    fn sigmoid_slope_at_zero() {
        let x = Tensor::<f64>::new(vec![1], vec![0.0]).unwrap();
        let g = finite_diff_grad(|t| Ok(t.data().iter().map(|&v| sigmoid_scalar(v)).sum()), &x, 1e-3).unwrap();
        assert!((g[0] - 0.25).abs() < 1e-6);
    }

    #[test]
    fn non_finite_is_overflow() {
        let x = Tensor::<f32>::new(vec![1], vec![0.0]).unwrap();
        let err = finite_diff_grad(|t| Ok(t.data()[0] / 0.0), &x, 1e-3).unwrap_err();
        assert!(matches!(err, Error::NumericOverflow(_)));
    }

    #[test]
    fn bad_step() {
        let x = Tensor::<f32>::new(vec![1], vec![0.0]).unwrap();
        assert!(finite_diff_grad(|t| Ok(t.sum()), &x, 0.0).is_err());
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1e-9, 0.0) - 1e-3).abs() < 1e-12);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-12);
    }
}
