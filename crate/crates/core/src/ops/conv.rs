//! Grouped 2-D convolution over NCHW tensors (cross-correlation, as in every CNN framework).
//!
//! Each sample is lowered to a column matrix and multiplied against the
//! per-group kernel matrix. Samples run in parallel; kernel gradients are
//! accumulated per sample and then summed in sample order so the result does
//! not depend on the thread count.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::element::Element;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub groups: usize,
}

impl Default for ConvGeometry {
    fn default() -> Self {
        Self { stride: (1, 1), padding: (0, 0), groups: 1 }
    }
}

impl ConvGeometry {
    pub fn new(stride: usize, padding: usize, groups: usize) -> Self {
        Self { stride: (stride, stride), padding: (padding, padding), groups }
    }
}

/// Kernel `[C_out, C_in / groups, K_h, K_w]` with optional bias `[C_out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2dParams<T: Element = f32> {
    pub kernel: Tensor<T>,
    pub bias: Option<Tensor<T>>,
    pub geometry: ConvGeometry,
}

pub fn conv_output_size(input: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::InvalidConfig("stride must be positive".into()));
    }
    let padded = input + 2 * padding;
    if padded < kernel {
        return Err(Error::InvalidShape(format!(
            "kernel {kernel} exceeds padded input extent {padded}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

/// Resolved sizes for one convolution call.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    n: usize,
    c_in: usize,
    h_in: usize,
    w_in: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    h_out: usize,
    w_out: usize,
    geo: ConvGeometry,
}

impl ConvDims {
    pub(crate) fn resolve(input: &[usize], kernel: &[usize], geo: ConvGeometry) -> Result<Self> {
        if input.len() != 4 {
            return Err(Error::InvalidShape(format!("conv2d input must be NCHW, got {input:?}")));
        }
        if kernel.len() != 4 {
            return Err(Error::InvalidShape(format!("conv2d kernel must be rank 4, got {kernel:?}")));
        }
        let (n, c_in, h_in, w_in) = (input[0], input[1], input[2], input[3]);
        let (c_out, c_in_g, kh, kw) = (kernel[0], kernel[1], kernel[2], kernel[3]);
        let g = geo.groups;
        if g == 0 || c_in % g != 0 || c_out % g != 0 {
            return Err(Error::InvalidConfig(format!(
                "groups {g} must divide input channels {c_in} and output channels {c_out}"
            )));
        }
        if c_in / g != c_in_g {
            return Err(Error::InvalidConfig(format!(
                "kernel expects {c_in_g} input channels per group, input provides {}",
                c_in / g
            )));
        }
        let h_out = conv_output_size(h_in, kh, geo.stride.0, geo.padding.0)?;
        let w_out = conv_output_size(w_in, kw, geo.stride.1, geo.padding.1)?;
        Ok(Self { n, c_in, h_in, w_in, c_out, kh, kw, h_out, w_out, geo })
    }

    pub(crate) fn output_shape(&self) -> Vec<usize> {
        vec![self.n, self.c_out, self.h_out, self.w_out]
    }

    fn cin_g(&self) -> usize {
        self.c_in / self.geo.groups
    }

    fn cout_g(&self) -> usize {
        self.c_out / self.geo.groups
    }

    /// Rows of the column matrix for one group.
    fn col_rows(&self) -> usize {
        self.cin_g() * self.kh * self.kw
    }

    fn spatial_out(&self) -> usize {
        self.h_out * self.w_out
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1
            && self.kw == 1
            && self.geo.stride == (1, 1)
            && self.geo.padding == (0, 0)
    }
}

/// Lowers the input channels of one group of one sample into `cols` (`col_rows x spatial_out`).
fn im2col<T: Element>(d: &ConvDims, x_group: &[T], cols: &mut [T]) {
    let (sh, sw) = d.geo.stride;
    let (ph, pw) = d.geo.padding;
    let hw_out = d.spatial_out();
    for c in 0..d.cin_g() {
        let plane = &x_group[c * d.h_in * d.w_in..(c + 1) * d.h_in * d.w_in];
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let row = (c * d.kh + ki) * d.kw + kj;
                let dst = &mut cols[row * hw_out..(row + 1) * hw_out];
                for oy in 0..d.h_out {
                    let iy = (oy * sh + ki) as isize - ph as isize;
                    let line = &mut dst[oy * d.w_out..(oy + 1) * d.w_out];
                    if iy < 0 || iy >= d.h_in as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * d.w_in..(iy as usize + 1) * d.w_in];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * sw + kj) as isize - pw as isize;
                        *v = if ix < 0 || ix >= d.w_in as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Scatter-adds a column matrix back onto the input planes of one group.
fn col2im<T: Element>(d: &ConvDims, cols: &[T], dx_group: &mut [T]) {
    let (sh, sw) = d.geo.stride;
    let (ph, pw) = d.geo.padding;
    let hw_out = d.spatial_out();
    for c in 0..d.cin_g() {
        let plane = &mut dx_group[c * d.h_in * d.w_in..(c + 1) * d.h_in * d.w_in];
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let row = (c * d.kh + ki) * d.kw + kj;
                let src = &cols[row * hw_out..(row + 1) * hw_out];
                for oy in 0..d.h_out {
                    let iy = (oy * sh + ki) as isize - ph as isize;
                    if iy < 0 || iy >= d.h_in as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * d.w_in..(iy as usize + 1) * d.w_in];
                    for ox in 0..d.w_out {
                        let ix = (ox * sw + kj) as isize - pw as isize;
                        if ix >= 0 && ix < d.w_in as isize {
                            dst[ix as usize] = dst[ix as usize] + src[oy * d.w_out + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Element>(
    d: &ConvDims,
    x: &[T],
    kernel: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let hw_out = d.spatial_out();
    let rows = d.col_rows();
    let per_in = d.c_in * d.h_in * d.w_in;
    let per_out = d.c_out * hw_out;
    let mut out = vec![T::zero(); d.n * per_out];
    out.par_chunks_mut(per_out).enumerate().for_each(|(n, y)| {
        let xs = &x[n * per_in..(n + 1) * per_in];
        let mut cols = if d.is_pointwise() { Vec::new() } else { vec![T::zero(); rows * hw_out] };
        for g in 0..d.geo.groups {
            let xg = &xs[g * d.cin_g() * d.h_in * d.w_in..(g + 1) * d.cin_g() * d.h_in * d.w_in];
            let b: &[T] = if d.is_pointwise() {
                xg
            } else {
                im2col(d, xg, &mut cols);
                &cols
            };
            let wg = &kernel[g * d.cout_g() * rows..(g + 1) * d.cout_g() * rows];
            let yg = &mut y[g * d.cout_g() * hw_out..(g + 1) * d.cout_g() * hw_out];
            T::gemm(d.cout_g(), rows, hw_out, T::one(), wg, (rows as isize, 1), b, (hw_out as isize, 1), T::zero(), yg);
        }
        if let Some(bias) = bias {
            for (c, plane) in y.chunks_mut(hw_out).enumerate() {
                for v in plane {
                    *v = *v + bias[c];
                }
            }
        }
    });
    out
}

pub(crate) struct ConvGrads<T> {
    pub input: Vec<T>,
    pub kernel: Vec<T>,
    pub bias: Vec<T>,
}

pub(crate) fn conv2d_backward<T: Element>(
    d: &ConvDims,
    x: &[T],
    kernel: &[T],
    grad_out: &[T],
    need_input_grad: bool,
) -> ConvGrads<T> {
    let hw_out = d.spatial_out();
    let rows = d.col_rows();
    let per_in = d.c_in * d.h_in * d.w_in;
    let per_out = d.c_out * hw_out;
    let kernel_len = kernel.len();
    let in_g = d.cin_g() * d.h_in * d.w_in;

    let partials: Vec<(Vec<T>, Vec<T>)> = (0..d.n)
        .into_par_iter()
        .map(|n| {
            let xs = &x[n * per_in..(n + 1) * per_in];
            let gy = &grad_out[n * per_out..(n + 1) * per_out];
            let mut dx = if need_input_grad { vec![T::zero(); per_in] } else { Vec::new() };
            let mut dw = vec![T::zero(); kernel_len];
            let mut cols = if d.is_pointwise() { Vec::new() } else { vec![T::zero(); rows * hw_out] };
            for g in 0..d.geo.groups {
                let xg = &xs[g * in_g..(g + 1) * in_g];
                let gyg = &gy[g * d.cout_g() * hw_out..(g + 1) * d.cout_g() * hw_out];
                let wg = &kernel[g * d.cout_g() * rows..(g + 1) * d.cout_g() * rows];
                let b: &[T] = if d.is_pointwise() {
                    xg
                } else {
                    im2col(d, xg, &mut cols);
                    &cols
                };
                // dW_g = dY_g (cout_g x hw) * cols^T (hw x rows)
                let dwg = &mut dw[g * d.cout_g() * rows..(g + 1) * d.cout_g() * rows];
                T::gemm(d.cout_g(), hw_out, rows, T::one(), gyg, (hw_out as isize, 1), b, (1, hw_out as isize), T::zero(), dwg);
                if need_input_grad {
                    let dxg = &mut dx[g * in_g..(g + 1) * in_g];
                    if d.is_pointwise() {
                        T::gemm(rows, d.cout_g(), hw_out, T::one(), wg, (1, rows as isize), gyg, (hw_out as isize, 1), T::zero(), dxg);
                    } else {
                        let mut dcols = vec![T::zero(); rows * hw_out];
                        T::gemm(rows, d.cout_g(), hw_out, T::one(), wg, (1, rows as isize), gyg, (hw_out as isize, 1), T::zero(), &mut dcols);
                        col2im(d, &dcols, dxg);
                    }
                }
            }
            (dx, dw)
        })
        .collect();

    let mut input = if need_input_grad { Vec::with_capacity(d.n * per_in) } else { Vec::new() };
    let mut kernel_grad = vec![T::zero(); kernel_len];
    for (dx, dw) in partials {
        input.extend(dx);
        for (acc, v) in kernel_grad.iter_mut().zip(dw) {
            *acc = *acc + v;
        }
    }
    let mut bias = vec![T::zero(); d.c_out];
    for n in 0..d.n {
        for (c, b) in bias.iter_mut().enumerate() {
            let plane = &grad_out[n * per_out + c * hw_out..n * per_out + (c + 1) * hw_out];
            *b = *b + plane.iter().copied().sum::<T>();
        }
    }
    ConvGrads { input, kernel: kernel_grad, bias }
}

/// Forward convolution on owned tensors.
pub fn conv2d<T: Element>(input: &Tensor<T>, params: &Conv2dParams<T>) -> Result<Tensor<T>> {
    let d = ConvDims::resolve(input.shape(), params.kernel.shape(), params.geometry)?;
    if let Some(b) = &params.bias {
        if b.shape() != [d.c_out] {
            return Err(Error::SizeMismatch(format!("bias shape {:?}, expected [{}]", b.shape(), d.c_out)));
        }
    }
    let out = conv2d_forward(&d, input.data(), params.kernel.data(), params.bias.as_ref().map(|b| b.data()));
    Ok(Tensor::from_parts(d.output_shape(), out))
}
