//! Dense rank-4 tensors, bias-free 2D convolution and plain SGD.
//!
//! Layouts are fixed: feature maps are `(b, h, w, c)` and kernels are
//! `(k, k, c_i, c_o)`, both row-major. Every output element of a convolution
//! is accumulated in 64-bit arithmetic in `(ky, kx, ci)` order starting from
//! zero, so results are reproducible bit for bit regardless of how the batch
//! axis is split across threads.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LhcError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    dims: [usize; 4],
    data: Vec<f64>,
}

impl Tensor4 {
    pub fn new(dims: [usize; 4], data: Vec<f64>) -> Result<Self> {
        let len = dims.iter().product::<usize>();
        if data.len() != len {
            return Err(LhcError::shape(&[len], &[data.len()]));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(LhcError::NonFinite("tensor data"));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: [usize; 4]) -> Self {
        Self::filled(dims, 0.0)
    }

    pub fn filled(dims: [usize; 4], value: f64) -> Self {
        Self {
            dims,
            data: vec![value; dims.iter().product()],
        }
    }

    /// Builds a tensor by evaluating `f` at every index in row-major order.
    pub fn from_fn(dims: [usize; 4], mut f: impl FnMut([usize; 4]) -> f64) -> Self {
        let mut data = Vec::with_capacity(dims.iter().product());
        for a in 0..dims[0] {
            for b in 0..dims[1] {
                for c in 0..dims[2] {
                    for d in 0..dims[3] {
                        data.push(f([a, b, c, d]));
                    }
                }
            }
        }
        Self { dims, data }
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn offset(&self, idx: [usize; 4]) -> usize {
        let [_, d1, d2, d3] = self.dims;
        ((idx[0] * d1 + idx[1]) * d2 + idx[2]) * d3 + idx[3]
    }

    #[inline]
    pub fn at(&self, idx: [usize; 4]) -> f64 {
        self.data[self.offset(idx)]
    }

    #[inline]
    pub fn set(&mut self, idx: [usize; 4], value: f64) {
        let off = self.offset(idx);
        self.data[off] = value;
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            dims: self.dims,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, a: f64) -> Self {
        self.map(|v| a * v)
    }

    fn same_dims(&self, other: &Tensor4) -> Result<()> {
        if self.dims != other.dims {
            return Err(LhcError::shape(&self.dims, &other.dims));
        }
        Ok(())
    }

    /// Elementwise product.
    pub fn hadamard(&self, other: &Tensor4) -> Result<Self> {
        self.same_dims(other)?;
        Ok(Self {
            dims: self.dims,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a * b)
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor4) -> Result<Self> {
        self.same_dims(other)?;
        Ok(Self {
            dims: self.dims,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + b)
                .collect(),
        })
    }

    /// Frobenius inner product.
    pub fn dot(&self, other: &Tensor4) -> Result<f64> {
        self.same_dims(other)?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn max_abs_diff(&self, other: &Tensor4) -> Result<f64> {
        self.same_dims(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }
}

/// Geometry of one convolution: kernel size, stride, symmetric zero padding
/// and the channel/spatial extents on both sides.
///
/// Output extents use floor division, `h_o = (h_i + 2p - k) / s + 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub c_i: usize,
    pub c_o: usize,
    pub h_i: usize,
    pub w_i: usize,
    pub h_o: usize,
    pub w_o: usize,
}

impl ConvGeometry {
    pub fn new(
        k: usize,
        stride: usize,
        padding: usize,
        c_i: usize,
        c_o: usize,
        h_i: usize,
        w_i: usize,
    ) -> Result<Self> {
        if k == 0 || c_i == 0 || c_o == 0 || h_i == 0 || w_i == 0 {
            return Err(LhcError::InvalidArgument(
                "kernel size, channels and spatial extents must be positive".into(),
            ));
        }
        if !(1..=2).contains(&stride) {
            return Err(LhcError::InvalidArgument(format!(
                "stride must be 1 or 2, got {stride}"
            )));
        }
        if h_i + 2 * padding < k || w_i + 2 * padding < k {
            return Err(LhcError::InvalidArgument(format!(
                "kernel {k} larger than padded input {}x{}",
                h_i + 2 * padding,
                w_i + 2 * padding
            )));
        }
        Ok(Self {
            k,
            stride,
            padding,
            c_i,
            c_o,
            h_i,
            w_i,
            h_o: (h_i + 2 * padding - k) / stride + 1,
            w_o: (w_i + 2 * padding - k) / stride + 1,
        })
    }

    pub fn kernel_dims(&self) -> [usize; 4] {
        [self.k, self.k, self.c_i, self.c_o]
    }

    pub fn input_dims(&self, batch: usize) -> [usize; 4] {
        [batch, self.h_i, self.w_i, self.c_i]
    }

    pub fn output_dims(&self, batch: usize) -> [usize; 4] {
        [batch, self.h_o, self.w_o, self.c_o]
    }

    /// Input coordinate touched by output coordinate `o` and kernel tap `t`,
    /// or `None` when it falls in the zero padding.
    #[inline]
    pub fn source(&self, o: usize, t: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + t).checked_sub(self.padding)?;
        (pos < extent).then_some(pos)
    }

    fn check_input(&self, input: &Tensor4) -> Result<usize> {
        let b = input.dims()[0];
        if input.dims() != self.input_dims(b) {
            return Err(LhcError::shape(&self.input_dims(b), &input.dims()));
        }
        Ok(b)
    }

    fn check_kernel(&self, kernel: &Tensor4) -> Result<()> {
        if kernel.dims() != self.kernel_dims() {
            return Err(LhcError::shape(&self.kernel_dims(), &kernel.dims()));
        }
        Ok(())
    }
}

pub fn conv2d_forward(input: &Tensor4, kernel: &Tensor4, geom: &ConvGeometry) -> Result<Tensor4> {
    let b = geom.check_input(input)?;
    geom.check_kernel(kernel)?;
    let g = *geom;
    let (x, w) = (input.data(), kernel.data());
    let in_per = g.h_i * g.w_i * g.c_i;
    let out_per = g.h_o * g.w_o * g.c_o;
    let mut out = vec![0.0; b * out_per];
    if out_per > 0 {
        out.par_chunks_mut(out_per)
            .enumerate()
            .for_each(|(n, out_n)| {
                let x_n = &x[n * in_per..(n + 1) * in_per];
                for oy in 0..g.h_o {
                    for ox in 0..g.w_o {
                        let base = (oy * g.w_o + ox) * g.c_o;
                        let acc = &mut out_n[base..base + g.c_o];
                        for ky in 0..g.k {
                            let Some(iy) = g.source(oy, ky, g.h_i) else {
                                continue;
                            };
                            for kx in 0..g.k {
                                let Some(ix) = g.source(ox, kx, g.w_i) else {
                                    continue;
                                };
                                let px = &x_n[(iy * g.w_i + ix) * g.c_i..][..g.c_i];
                                for (ci, &xv) in px.iter().enumerate() {
                                    let wrow = &w[((ky * g.k + kx) * g.c_i + ci) * g.c_o..][..g.c_o];
                                    for (a, &wv) in acc.iter_mut().zip(wrow) {
                                        *a += xv * wv;
                                    }
                                }
                            }
                        }
                    }
                }
            });
    }
    let out = Tensor4 {
        dims: g.output_dims(b),
        data: out,
    };
    if !out.all_finite() {
        return Err(LhcError::NonFinite("conv2d_forward output"));
    }
    Ok(out)
}

/// Exact gradients of [`conv2d_forward`] with respect to its input and kernel.
pub fn conv2d_backward(
    upstream: &Tensor4,
    input: &Tensor4,
    kernel: &Tensor4,
    geom: &ConvGeometry,
) -> Result<(Tensor4, Tensor4)> {
    let b = geom.check_input(input)?;
    geom.check_kernel(kernel)?;
    if upstream.dims() != geom.output_dims(b) {
        return Err(LhcError::shape(&geom.output_dims(b), &upstream.dims()));
    }
    let g = *geom;
    let (x, w, up) = (input.data(), kernel.data(), upstream.data());
    let in_per = g.h_i * g.w_i * g.c_i;
    let out_per = g.h_o * g.w_o * g.c_o;
    let k_len = kernel.len();

    let partials: Vec<(Vec<f64>, Vec<f64>)> = (0..b)
        .into_par_iter()
        .map(|n| {
            let x_n = &x[n * in_per..(n + 1) * in_per];
            let up_n = &up[n * out_per..(n + 1) * out_per];
            let mut gi = vec![0.0; in_per];
            let mut gk = vec![0.0; k_len];
            for oy in 0..g.h_o {
                for ox in 0..g.w_o {
                    let u = &up_n[(oy * g.w_o + ox) * g.c_o..][..g.c_o];
                    for ky in 0..g.k {
                        let Some(iy) = g.source(oy, ky, g.h_i) else {
                            continue;
                        };
                        for kx in 0..g.k {
                            let Some(ix) = g.source(ox, kx, g.w_i) else {
                                continue;
                            };
                            let pbase = (iy * g.w_i + ix) * g.c_i;
                            for ci in 0..g.c_i {
                                let woff = ((ky * g.k + kx) * g.c_i + ci) * g.c_o;
                                let wrow = &w[woff..woff + g.c_o];
                                let xv = x_n[pbase + ci];
                                let mut s = 0.0;
                                for ((&uv, &wv), gkv) in
                                    u.iter().zip(wrow).zip(&mut gk[woff..woff + g.c_o])
                                {
                                    s += uv * wv;
                                    *gkv += uv * xv;
                                }
                                gi[pbase + ci] += s;
                            }
                        }
                    }
                }
            }
            (gi, gk)
        })
        .collect();

    let mut grad_input = Vec::with_capacity(b * in_per);
    let mut grad_kernel = vec![0.0; k_len];
    for (gi, gk) in partials {
        grad_input.extend_from_slice(&gi);
        for (acc, v) in grad_kernel.iter_mut().zip(gk) {
            *acc += v;
        }
    }
    let gi = Tensor4 {
        dims: input.dims(),
        data: grad_input,
    };
    let gk = Tensor4 {
        dims: kernel.dims(),
        data: grad_kernel,
    };
    if !gi.all_finite() || !gk.all_finite() {
        return Err(LhcError::NonFinite("conv2d_backward gradients"));
    }
    Ok((gi, gk))
}

/// In-place `p <- p - lr * g` over matching parameter/gradient pairs.
pub fn sgd_step(params: &mut [&mut Tensor4], grads: &[&Tensor4], lr: f64) -> Result<()> {
    if !(lr.is_finite() && lr > 0.0) {
        return Err(LhcError::InvalidArgument(format!(
            "learning rate must be positive and finite, got {lr}"
        )));
    }
    if params.len() != grads.len() {
        return Err(LhcError::shape(&[params.len()], &[grads.len()]));
    }
    for (p, g) in params.iter().zip(grads) {
        p.same_dims(g)?;
    }
    for (p, g) in params.iter_mut().zip(grads) {
        for (pv, gv) in p.data.iter_mut().zip(&g.data) {
            *pv -= lr * gv;
        }
    }
    Ok(())
}
