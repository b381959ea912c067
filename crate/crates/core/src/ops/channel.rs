//! Per-channel operations used by the attention modules and by parameter-free shortcuts.

use crate::element::Element;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `out[n, c, ..] = y[n, c, ..] * v[n, c]`.
pub(crate) fn channel_scale_forward<T: Element>(y: &[T], v: &[T], plane: usize) -> Vec<T> {
    y.chunks(plane)
        .zip(v)
        .flat_map(|(p, &s)| p.iter().map(move |&e| e * s))
        .collect()
}

pub(crate) fn channel_scale_backward<T: Element>(gy: &[T], y: &[T], v: &[T], plane: usize) -> (Vec<T>, Vec<T>) {
    let dy = channel_scale_forward(gy, v, plane);
    let dv = gy
        .chunks(plane)
        .zip(y.chunks(plane))
        .map(|(g, p)| g.iter().zip(p).map(|(&a, &b)| a * b).sum())
        .collect();
    (dy, dv)
}

pub(crate) fn check_channel_scale(y: &[usize], v: &[usize]) -> Result<usize> {
    match (y, v) {
        ([n, c, h, w], [vn, vc]) if n == vn && c == vc => Ok(h * w),
        _ => Err(Error::SizeMismatch(format!("cannot scale {y:?} by channel weights {v:?}"))),
    }
}

/// Scales every channel plane of an NCHW tensor by its own weight from `[N, C]`.
pub fn channel_scale<T: Element>(y: &Tensor<T>, v: &Tensor<T>) -> Result<Tensor<T>> {
    let plane = check_channel_scale(y.shape(), v.shape())?;
    Ok(Tensor::from_parts(y.shape().to_vec(), channel_scale_forward(y.data(), v.data(), plane)))
}

/// Global depthwise convolution: each channel is correlated with a kernel of its own full
/// spatial size, giving one scalar per channel. `u: [N, C, h, w]`, `kernel: [C, h, w]`.
pub(crate) fn gdconv_forward<T: Element>(u: &[T], kernel: &[T], bias: &[T], n: usize, c: usize, plane: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(n * c);
    for ni in 0..n {
        for ci in 0..c {
            let x = &u[(ni * c + ci) * plane..(ni * c + ci + 1) * plane];
            let k = &kernel[ci * plane..(ci + 1) * plane];
            out.push(x.iter().zip(k).map(|(&a, &b)| a * b).sum::<T>() + bias[ci]);
        }
    }
    out
}

pub(crate) struct GdConvGrads<T> {
    pub input: Vec<T>,
    pub kernel: Vec<T>,
    pub bias: Vec<T>,
}

pub(crate) fn gdconv_backward<T: Element>(g: &[T], u: &[T], kernel: &[T], n: usize, c: usize, plane: usize) -> GdConvGrads<T> {
    let mut input = vec![T::zero(); u.len()];
    let mut dk = vec![T::zero(); kernel.len()];
    let mut db = vec![T::zero(); c];
    for ni in 0..n {
        for ci in 0..c {
            let gv = g[ni * c + ci];
            let range = (ni * c + ci) * plane..(ni * c + ci + 1) * plane;
            let k = &kernel[ci * plane..(ci + 1) * plane];
            let dk_c = &mut dk[ci * plane..(ci + 1) * plane];
            for (((d, acc), &kv), &uv) in input[range.clone()].iter_mut().zip(dk_c).zip(k).zip(&u[range]) {
                *d = gv * kv;
                *acc = *acc + gv * uv;
            }
            db[ci] = db[ci] + gv;
        }
    }
    GdConvGrads { input, kernel: dk, bias: db }
}

pub(crate) fn check_gdconv(u: &[usize], kernel: &[usize], bias: &[usize]) -> Result<(usize, usize, usize)> {
    match (u, kernel, bias) {
        ([n, c, h, w], [kc, kh, kw], [bc]) if c == kc && h == kh && w == kw && c == bc => Ok((*n, *c, h * w)),
        _ => Err(Error::InvalidConfig(format!(
            "global depthwise kernel {kernel:?} / bias {bias:?} do not match input {u:?}"
        ))),
    }
}

pub fn gdconv<T: Element>(u: &Tensor<T>, kernel: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, plane) = check_gdconv(u.shape(), kernel.shape(), bias.shape())?;
    Ok(Tensor::from_parts(vec![n, c], gdconv_forward(u.data(), kernel.data(), bias.data(), n, c, plane)))
}

/// Parameter-free shortcut: spatial subsampling by `stride` and zero channels split evenly
/// before and after the existing ones.
#[derive(Clone, Copy, Debug)]
pub(crate) struct PadShortcut {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub stride: usize,
}

impl PadShortcut {
    pub fn resolve(shape: &[usize], c_out: usize, stride: usize) -> Result<Self> {
        match *shape {
            [n, c_in, h, w] if c_out >= c_in && stride >= 1 => Ok(Self { n, c_in, h, w, c_out, stride }),
            _ => Err(Error::InvalidConfig(format!(
                "pad shortcut cannot map {shape:?} to {c_out} channels with stride {stride}"
            ))),
        }
    }

    pub fn out_hw(&self) -> (usize, usize) {
        (self.h.div_ceil(self.stride), self.w.div_ceil(self.stride))
    }

    pub fn output_shape(&self) -> Vec<usize> {
        let (ho, wo) = self.out_hw();
        vec![self.n, self.c_out, ho, wo]
    }

    fn lead(&self) -> usize {
        (self.c_out - self.c_in) / 2
    }

    pub fn forward<T: Element>(&self, x: &[T]) -> Vec<T> {
        let (ho, wo) = self.out_hw();
        let mut out = vec![T::zero(); self.n * self.c_out * ho * wo];
        for n in 0..self.n {
            for c in 0..self.c_in {
                let src = &x[(n * self.c_in + c) * self.h * self.w..];
                let dst = &mut out[(n * self.c_out + c + self.lead()) * ho * wo..];
                for oy in 0..ho {
                    for ox in 0..wo {
                        dst[oy * wo + ox] = src[oy * self.stride * self.w + ox * self.stride];
                    }
                }
            }
        }
        out
    }

    pub fn backward<T: Element>(&self, g: &[T]) -> Vec<T> {
        let (ho, wo) = self.out_hw();
        let mut dx = vec![T::zero(); self.n * self.c_in * self.h * self.w];
        for n in 0..self.n {
            for c in 0..self.c_in {
                let src = &g[(n * self.c_out + c + self.lead()) * ho * wo..];
                let dst = &mut dx[(n * self.c_in + c) * self.h * self.w..];
                for oy in 0..ho {
                    for ox in 0..wo {
                        dst[oy * self.stride * self.w + ox * self.stride] = src[oy * wo + ox];
                    }
                }
            }
        }
        dx
    }
}
