use crate::element::Element;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub(crate) fn linear_dims(x: &[usize], w: &[usize], b: Option<&[usize]>) -> Result<(usize, usize, usize)> {
    let (n, fin) = match *x {
        [n, f] => (n, f),
        _ => return Err(Error::InvalidShape(format!("fully_connected input must be [N, F], got {x:?}"))),
    };
    let fout = match *w {
        [o, i] if i == fin => o,
        _ => return Err(Error::SizeMismatch(format!("weight {w:?} does not accept {fin} input features"))),
    };
    if let Some(b) = b {
        if b != [fout] {
            return Err(Error::SizeMismatch(format!("bias {b:?} for {fout} outputs")));
        }
    }
    Ok((n, fin, fout))
}

/// `y = x W^T + b` with `x: [N, in]`, `W: [out, in]`.
pub(crate) fn linear_forward<T: Element>(x: &[T], w: &[T], b: Option<&[T]>, dims: (usize, usize, usize)) -> Vec<T> {
    let (n, fin, fout) = dims;
    let mut y = vec![T::zero(); n * fout];
    if let Some(b) = b {
        for row in y.chunks_mut(fout) {
            row.copy_from_slice(b);
        }
    }
    let beta = if b.is_some() { T::one() } else { T::zero() };
    T::gemm(n, fin, fout, T::one(), x, (fin as isize, 1), w, (1, fin as isize), beta, &mut y);
    y
}

pub(crate) struct LinearGrads<T> {
    pub input: Vec<T>,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

pub(crate) fn linear_backward<T: Element>(gy: &[T], x: &[T], w: &[T], dims: (usize, usize, usize)) -> LinearGrads<T> {
    let (n, fin, fout) = dims;
    let mut input = vec![T::zero(); n * fin];
    T::gemm(n, fout, fin, T::one(), gy, (fout as isize, 1), w, (fin as isize, 1), T::zero(), &mut input);
    let mut weight = vec![T::zero(); fout * fin];
    T::gemm(fout, n, fin, T::one(), gy, (1, fout as isize), x, (fin as isize, 1), T::zero(), &mut weight);
    let mut bias = vec![T::zero(); fout];
    for row in gy.chunks(fout) {
        for (b, &g) in bias.iter_mut().zip(row) {
            *b = *b + g;
        }
    }
    LinearGrads { input, weight, bias }
}

pub fn fully_connected<T: Element>(x: &Tensor<T>, weight: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let dims = linear_dims(x.shape(), weight.shape(), bias.map(|b| b.shape()))?;
    let y = linear_forward(x.data(), weight.data(), bias.map(|b| b.data()), dims);
    Ok(Tensor::from_parts(vec![dims.0, dims.2], y))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_product() {
        let x = Tensor::<f32>::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let w = Tensor::new(vec![3, 2], vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
        let b = Tensor::new(vec![3], vec![0.5, 0.5, 0.5]).unwrap();
        let y = fully_connected(&x, &w, Some(&b)).unwrap();
        assert_eq!(y.data(), &[1.5, 2.5, 3.5]);
    }

    #[test]
    fn shape_errors() {
        let x = Tensor::<f32>::zeros(vec![1, 2]).unwrap();
        let w = Tensor::zeros(vec![3, 4]).unwrap();
        assert!(matches!(fully_connected(&x, &w, None), Err(Error::SizeMismatch(_))));
    }
}
