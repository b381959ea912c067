use crate::element::Element;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Half-open range of input indices averaged into output bin `i` of `out` bins over `len` inputs.
///
/// Bins use `[floor(i*len/out), ceil((i+1)*len/out))`, so they tile the input exactly when
/// `out` divides `len`, overlap by at most one element otherwise, and degenerate to the
/// identity when `out == len`.
pub fn adaptive_bin(i: usize, out: usize, len: usize) -> (usize, usize) {
    let start = i * len / out;
    let end = ((i + 1) * len).div_ceil(out);
    (start, end)
}

fn nchw(shape: &[usize], what: &str) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(Error::InvalidShape(format!("{what} expects an NCHW tensor, got {shape:?}"))),
    }
}

pub(crate) fn check_adaptive_target(h: usize, w: usize, target: (usize, usize)) -> Result<()> {
    if target.0 == 0 || target.1 == 0 || target.0 > h || target.1 > w {
        return Err(Error::InvalidTarget { target, input: (h, w) });
    }
    Ok(())
}

pub(crate) fn adaptive_avg_pool_forward<T: Element>(x: &[T], dims: (usize, usize, usize, usize), target: (usize, usize)) -> Vec<T> {
    let (n, c, h, w) = dims;
    let (th, tw) = target;
    let mut out = Vec::with_capacity(n * c * th * tw);
    for plane in x.chunks(h * w).take(n * c) {
        for a in 0..th {
            let (r0, r1) = adaptive_bin(a, th, h);
            for b in 0..tw {
                let (c0, c1) = adaptive_bin(b, tw, w);
                let mut acc = T::zero();
                for r in r0..r1 {
                    for v in &plane[r * w + c0..r * w + c1] {
                        acc = acc + *v;
                    }
                }
                out.push(acc / T::from_usize((r1 - r0) * (c1 - c0)).unwrap());
            }
        }
    }
    out
}

pub(crate) fn adaptive_avg_pool_backward<T: Element>(grad_out: &[T], dims: (usize, usize, usize, usize), target: (usize, usize)) -> Vec<T> {
    let (n, c, h, w) = dims;
    let (th, tw) = target;
    let mut dx = vec![T::zero(); n * c * h * w];
    for (plane, g) in dx.chunks_mut(h * w).zip(grad_out.chunks(th * tw)) {
        for a in 0..th {
            let (r0, r1) = adaptive_bin(a, th, h);
            for b in 0..tw {
                let (c0, c1) = adaptive_bin(b, tw, w);
                let share = g[a * tw + b] / T::from_usize((r1 - r0) * (c1 - c0)).unwrap();
                for r in r0..r1 {
                    for v in &mut plane[r * w + c0..r * w + c1] {
                        *v = *v + share;
                    }
                }
            }
        }
    }
    dx
}

/// Average pooling parameterized by output size.
pub fn adaptive_avg_pool<T: Element>(input: &Tensor<T>, target: (usize, usize)) -> Result<Tensor<T>> {
    let dims = nchw(input.shape(), "adaptive_avg_pool")?;
    check_adaptive_target(dims.2, dims.3, target)?;
    let out = adaptive_avg_pool_forward(input.data(), dims, target);
    Ok(Tensor::from_parts(vec![dims.0, dims.1, target.0, target.1], out))
}

pub(crate) fn global_avg_pool_forward<T: Element>(x: &[T], plane: usize) -> Vec<T> {
    let denom = T::from_usize(plane).unwrap();
    x.chunks(plane).map(|p| p.iter().copied().sum::<T>() / denom).collect()
}

pub(crate) fn global_avg_pool_backward<T: Element>(grad_out: &[T], plane: usize) -> Vec<T> {
    let denom = T::from_usize(plane).unwrap();
    grad_out.iter().flat_map(|&g| std::iter::repeat_n(g / denom, plane)).collect()
}

/// Per-channel spatial mean, `[N, C, H, W] -> [N, C]`.
pub fn global_avg_pool<T: Element>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = nchw(input.shape(), "global_avg_pool")?;
    Ok(Tensor::from_parts(vec![n, c], global_avg_pool_forward(input.data(), h * w)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MaxPoolGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

pub(crate) fn max_pool_output(h: usize, w: usize, geo: MaxPoolGeometry) -> Result<(usize, usize)> {
    if geo.padding * 2 > geo.kernel {
        return Err(Error::InvalidConfig("max pool padding exceeds half the kernel".into()));
    }
    Ok((
        super::conv::conv_output_size(h, geo.kernel, geo.stride, geo.padding)?,
        super::conv::conv_output_size(w, geo.kernel, geo.stride, geo.padding)?,
    ))
}

/// Returns the pooled values and the flat input index each one came from. Padding never wins.
pub(crate) fn max_pool_forward<T: Element>(x: &[T], dims: (usize, usize, usize, usize), geo: MaxPoolGeometry) -> Result<(Vec<T>, Vec<usize>, (usize, usize))> {
    let (n, c, h, w) = dims;
    let (ho, wo) = max_pool_output(h, w, geo)?;
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut arg = Vec::with_capacity(n * c * ho * wo);
    for (p, plane) in x.chunks(h * w).take(n * c).enumerate() {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best: Option<(T, usize)> = None;
                for ky in 0..geo.kernel {
                    let iy = (oy * geo.stride + ky) as isize - geo.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..geo.kernel {
                        let ix = (ox * geo.stride + kx) as isize - geo.padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let idx = iy as usize * w + ix as usize;
                        let v = plane[idx];
                        if best.is_none_or(|(b, _)| v > b) {
                            best = Some((v, idx));
                        }
                    }
                }
                let (v, idx) = best.expect("window overlaps input");
                out.push(v);
                arg.push(p * h * w + idx);
            }
        }
    }
    Ok((out, arg, (ho, wo)))
}

pub fn max_pool<T: Element>(input: &Tensor<T>, geo: MaxPoolGeometry) -> Result<Tensor<T>> {
    let dims = nchw(input.shape(), "max_pool")?;
    let (out, _, (ho, wo)) = max_pool_forward(input.data(), dims, geo)?;
    Ok(Tensor::from_parts(vec![dims.0, dims.1, ho, wo], out))
}
