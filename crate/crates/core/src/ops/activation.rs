use crate::element::Element;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Logistic function, kept strictly inside `(0, 1)` even where it would round to an endpoint.
pub fn sigmoid_scalar<T: Element>(x: T) -> T {
    let s = if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    };
    if s >= T::one() {
        T::one() - T::epsilon() / T::from_f64_lossy(2.0)
    } else if s <= T::zero() {
        T::min_positive_value()
    } else {
        s
    }
}

pub fn sigmoid<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    x.map(sigmoid_scalar)
}

pub fn relu<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Mean softmax cross-entropy over a batch of `[N, K]` logits.
///
/// Returns the loss and the softmax probabilities (needed for the gradient).
pub(crate) fn softmax_cross_entropy_forward<T: Element>(logits: &[T], n: usize, k: usize, labels: &[usize]) -> (T, Vec<T>) {
    let mut probs = vec![T::zero(); n * k];
    let mut loss = 0.0f64;
    for i in 0..n {
        let row = &logits[i * k..(i + 1) * k];
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for (p, &v) in probs[i * k..(i + 1) * k].iter_mut().zip(row) {
            *p = (v - max).exp();
            z = z + *p;
        }
        for p in &mut probs[i * k..(i + 1) * k] {
            *p = *p / z;
        }
        loss += (z.ln() + max - row[labels[i]]).as_f64();
    }
    (T::from_f64_lossy(loss / n as f64), probs)
}

pub(crate) fn softmax_cross_entropy_backward<T: Element>(probs: &[T], k: usize, labels: &[usize], upstream: T) -> Vec<T> {
    let n = labels.len();
    let scale = upstream / T::from_usize(n).unwrap();
    let mut g: Vec<T> = probs.iter().map(|&p| p * scale).collect();
    for (i, &l) in labels.iter().enumerate() {
        g[i * k + l] = g[i * k + l] - scale;
    }
    g
}

pub(crate) fn check_labels(shape: &[usize], labels: &[usize]) -> Result<(usize, usize)> {
    let (n, k) = match *shape {
        [n, k] => (n, k),
        _ => return Err(Error::InvalidShape(format!("logits must be [N, K], got {shape:?}"))),
    };
    if labels.len() != n {
        return Err(Error::SizeMismatch(format!("{} labels for a batch of {n}", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::InvalidConfig(format!("label {bad} out of range for {k} classes")));
    }
    Ok((n, k))
}

pub fn softmax_cross_entropy<T: Element>(logits: &Tensor<T>, labels: &[usize]) -> Result<T> {
    let (n, k) = check_labels(logits.shape(), labels)?;
    Ok(softmax_cross_entropy_forward(logits.data(), n, k, labels).0)
}

/// Row-wise softmax of `[N, K]` logits.
pub fn softmax<T: Element>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, k) = match *logits.shape() {
        [n, k] => (n, k),
        _ => return Err(Error::InvalidShape(format!("softmax expects [N, K], got {:?}", logits.shape()))),
    };
    let labels = vec![0; n];
    let (_, probs) = softmax_cross_entropy_forward(logits.data(), n, k, &labels);
    Ok(Tensor::from_parts(vec![n, k], probs))
}
