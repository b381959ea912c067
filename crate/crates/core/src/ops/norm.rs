use serde::{Deserialize, Serialize};

use crate::element::Element;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_BN_MOMENTUM: f64 = 0.1;
pub const DEFAULT_BN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchNormConfig {
    pub momentum: f64,
    pub eps: f64,
}

impl Default for BatchNormConfig {
    fn default() -> Self {
        Self { momentum: DEFAULT_BN_MOMENTUM, eps: DEFAULT_BN_EPS }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with batch statistics and update the running estimates.
    Train,
    /// Normalize with the running estimates.
    Eval,
}

/// Running mean and (unbiased) variance per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T: Element = f32> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Element> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        Self { mean: vec![T::zero(); channels], var: vec![T::one(); channels] }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    /// Folds one batch's statistics in with exponential averaging.
    pub fn update(&mut self, batch: &BatchStats<T>, momentum: f64) {
        let m = T::from_f64_lossy(momentum);
        let keep = T::one() - m;
        for c in 0..self.mean.len() {
            self.mean[c] = keep * self.mean[c] + m * batch.mean[c];
            self.var[c] = keep * self.var[c] + m * batch.unbiased_var[c];
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T: Element = f32> {
    pub mean: Vec<T>,
    pub unbiased_var: Vec<T>,
}

pub(crate) struct BnForward<T: Element> {
    pub y: Vec<T>,
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
    pub batch: Option<BatchStats<T>>,
}

/// `dims = (N, C, spatial)`; spatial is 1 for `[N, C]` inputs.
pub(crate) fn bn_dims(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [n, c] => Ok((n, c, 1)),
        [n, c, h, w] => Ok((n, c, h * w)),
        _ => Err(Error::InvalidShape(format!("batch_norm expects [N, C] or NCHW, got {shape:?}"))),
    }
}

pub(crate) fn bn_forward<T: Element>(
    x: &[T],
    dims: (usize, usize, usize),
    gamma: &[T],
    beta: &[T],
    running: &RunningStats<T>,
    mode: BnMode,
    eps: f64,
) -> BnForward<T> {
    let (n, c, s) = dims;
    let count = n * s;
    let (mean, var_biased, batch) = match mode {
        BnMode::Train => {
            let mut mean = vec![0.0f64; c];
            let mut var = vec![0.0f64; c];
            for ni in 0..n {
                for ci in 0..c {
                    let plane = &x[(ni * c + ci) * s..(ni * c + ci + 1) * s];
                    mean[ci] += plane.iter().map(|v| v.as_f64()).sum::<f64>();
                }
            }
            mean.iter_mut().for_each(|m| *m /= count as f64);
            for ni in 0..n {
                for ci in 0..c {
                    let plane = &x[(ni * c + ci) * s..(ni * c + ci + 1) * s];
                    var[ci] += plane.iter().map(|v| (v.as_f64() - mean[ci]).powi(2)).sum::<f64>();
                }
            }
            var.iter_mut().for_each(|v| *v /= count as f64);
            let unbiased = if count > 1 { count as f64 / (count - 1) as f64 } else { 1.0 };
            let batch = BatchStats {
                mean: mean.iter().map(|&m| T::from_f64_lossy(m)).collect(),
                unbiased_var: var.iter().map(|&v| T::from_f64_lossy(v * unbiased)).collect(),
            };
            (mean, var, Some(batch))
        }
        BnMode::Eval => (
            running.mean.iter().map(|v| v.as_f64()).collect(),
            running.var.iter().map(|v| v.as_f64()).collect(),
            None,
        ),
    };
    let inv_std: Vec<T> = var_biased.iter().map(|&v| T::from_f64_lossy(1.0 / (v + eps).sqrt())).collect();
    let mean_t: Vec<T> = mean.iter().map(|&m| T::from_f64_lossy(m)).collect();
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    for ni in 0..n {
        for ci in 0..c {
            let range = (ni * c + ci) * s..(ni * c + ci + 1) * s;
            for ((yv, xh), &xv) in y[range.clone()].iter_mut().zip(&mut xhat[range.clone()]).zip(&x[range]) {
                *xh = (xv - mean_t[ci]) * inv_std[ci];
                *yv = gamma[ci] * *xh + beta[ci];
            }
        }
    }
    BnForward { y, xhat, inv_std, batch }
}

pub(crate) struct BnGrads<T> {
    pub input: Vec<T>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

pub(crate) fn bn_backward<T: Element>(
    gy: &[T],
    xhat: &[T],
    inv_std: &[T],
    gamma: &[T],
    dims: (usize, usize, usize),
    mode: BnMode,
) -> BnGrads<T> {
    let (n, c, s) = dims;
    let count = T::from_usize(n * s).unwrap();
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for ni in 0..n {
        for ci in 0..c {
            let range = (ni * c + ci) * s..(ni * c + ci + 1) * s;
            for (&g, &xh) in gy[range.clone()].iter().zip(&xhat[range]) {
                dbeta[ci] = dbeta[ci] + g;
                dgamma[ci] = dgamma[ci] + g * xh;
            }
        }
    }
    let mut dx = vec![T::zero(); gy.len()];
    for ni in 0..n {
        for ci in 0..c {
            let range = (ni * c + ci) * s..(ni * c + ci + 1) * s;
            let scale = gamma[ci] * inv_std[ci];
            for ((d, &g), &xh) in dx[range.clone()].iter_mut().zip(&gy[range.clone()]).zip(&xhat[range]) {
                *d = match mode {
                    BnMode::Train => scale * (g - dbeta[ci] / count - xh * dgamma[ci] / count),
                    BnMode::Eval => scale * g,
                };
            }
        }
    }
    BnGrads { input: dx, gamma: dgamma, beta: dbeta }
}

/// Batch normalization over `[N, C]` or `[N, C, H, W]`. Training mode folds the batch
/// statistics into `running`.
pub fn batch_norm<T: Element>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running: &mut RunningStats<T>,
    mode: BnMode,
    config: BatchNormConfig,
) -> Result<Tensor<T>> {
    let dims = bn_dims(input.shape())?;
    if gamma.numel() != dims.1 || beta.numel() != dims.1 || running.channels() != dims.1 {
        return Err(Error::SizeMismatch(format!(
            "batch_norm over {} channels given gamma {:?}, beta {:?}, {} running channels",
            dims.1,
            gamma.shape(),
            beta.shape(),
            running.channels()
        )));
    }
    let out = bn_forward(input.data(), dims, gamma.data(), beta.data(), running, mode, config.eps);
    if let Some(batch) = &out.batch {
        running.update(batch, config.momentum);
    }
    Ok(Tensor::from_parts(input.shape().to_vec(), out.y))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn training_output_is_standardized() {
        let x = Tensor::<f32>::from_fn(vec![4, 3, 5, 5], |i| ((i * 7919 % 113) as f32) * 0.37 + (i % 3) as f32 * 10.0).unwrap();
        let gamma = Tensor::full(vec![3], 1.0).unwrap();
        let beta = Tensor::zeros(vec![3]).unwrap();
        let mut rs = RunningStats::new(3);
        let y = batch_norm(&x, &gamma, &beta, &mut rs, BnMode::Train, BatchNormConfig::default()).unwrap();
        for c in 0..3 {
            let vals: Vec<f64> = (0..4)
                .flat_map(|n| y.data()[(n * 3 + c) * 25..(n * 3 + c + 1) * 25].iter().map(|&v| v as f64))
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() <= 1e-5, "mean {mean}");
            assert!((var - 1.0).abs() <= 1e-4, "var {var}");
        }
        // running stats moved toward the batch statistics
        assert!(rs.mean.iter().all(|&m| m > 0.0));
    }

    #[test]
    fn running_update_uses_momentum() {
        let mut rs = RunningStats::<f64>::new(1);
        rs.update(&BatchStats { mean: vec![2.0], unbiased_var: vec![3.0] }, 0.1);
        assert!((rs.mean[0] - 0.2).abs() < 1e-12);
        assert!((rs.var[0] - (0.9 + 0.3)).abs() < 1e-12);
    }

    #[test]
    fn eval_mode_uses_running_stats() {
        let x = Tensor::<f64>::new(vec![1, 1, 1, 2], vec![3.0, 5.0]).unwrap();
        let mut rs = RunningStats { mean: vec![1.0], var: vec![4.0 - 1e-5] };
        let g = Tensor::full(vec![1], 2.0).unwrap();
        let b = Tensor::full(vec![1], 0.5).unwrap();
        let y = batch_norm(&x, &g, &b, &mut rs, BnMode::Eval, BatchNormConfig::default()).unwrap();
        assert!((y.data()[0] - 2.5).abs() < 1e-9);
        assert!((y.data()[1] - 4.5).abs() < 1e-9);
        assert_eq!(rs.mean, vec![1.0]);
    }

    #[test]
    fn channel_mismatch() {
        let x = Tensor::<f32>::zeros(vec![2, 3]).unwrap();
        let g = Tensor::zeros(vec![2]).unwrap();
        let mut rs = RunningStats::new(3);
        assert!(matches!(
            batch_norm(&x, &g, &g, &mut rs, BnMode::Train, BatchNormConfig::default()),
            Err(Error::SizeMismatch(_))
        ));
    }
}
