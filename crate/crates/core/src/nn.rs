//! Layer primitives with hand-written backward passes.
//!
//! Convolutions go through im2col + GEMM. Every backward function takes the
//! cached forward values it needs and accumulates parameter gradients into
//! caller-provided buffers.

use alloc::vec;
use alloc::vec::Vec;

use crate::real::{matmul, matmul_nt, matmul_tn, Real};
use crate::tensor::Tensor;

pub const LEAKY_SLOPE: f64 = 0.2;
pub const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    LeakyRelu,
    Tanh,
}

/// Geometry of a (possibly transposed) 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    /// Extra rows/cols appended to a transposed convolution's output.
    pub output_pad: usize,
    pub transposed: bool,
}

impl ConvGeom {
    pub fn conv(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        ConvGeom {
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
            output_pad: 0,
            transposed: false,
        }
    }

    pub fn transposed(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        output_pad: usize,
    ) -> Self {
        ConvGeom {
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
            output_pad,
            transposed: true,
        }
    }

    /// Output spatial size, or `None` if the geometry collapses.
    pub fn out_size(&self, input: usize) -> Option<usize> {
        if self.transposed {
            let full = (input.checked_sub(1)?) * self.stride + self.kernel + self.output_pad;
            full.checked_sub(2 * self.pad).filter(|&s| s > 0)
        } else {
            let span = (input + 2 * self.pad).checked_sub(self.kernel)?;
            Some(span / self.stride + 1)
        }
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        if self.transposed {
            [self.in_channels, self.out_channels, self.kernel, self.kernel]
        } else {
            [self.out_channels, self.in_channels, self.kernel, self.kernel]
        }
    }

    pub fn fan_in(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }
}

/// Unfolds one `(c, h, w)` image into a `(c·k·k) × (ho·wo)` patch matrix.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Real>(
    src: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    cols: &mut [T],
) {
    let hw_out = ho * wo;
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ch * k + ki) * k + kj;
                let dst = &mut cols[row * hw_out..(row + 1) * hw_out];
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        *v = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch columns back, accumulating.
#[allow(clippy::too_many_arguments)]
fn col2im<T: Real>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    dst: &mut [T],
) {
    let hw_out = ho * wo;
    for ch in 0..c {
        let plane = &mut dst[ch * h * w..(ch + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ch * k + ki) * k + kj;
                let src = &cols[row * hw_out..(row + 1) * hw_out];
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst_row[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution of an `(n, cin, h, w)` batch.
pub fn conv_forward<T: Real>(geom: &ConvGeom, x: &Tensor<T>, weight: &[T], bias: &[T]) -> Tensor<T> {
    let (n, c, h, w) = x.dims4();
    debug_assert_eq!(c, geom.in_channels);
    let k = geom.kernel;
    let ho = geom.out_size(h).expect("conv geometry validated at build time");
    let wo = geom.out_size(w).expect("conv geometry validated at build time");
    let cout = geom.out_channels;
    let mut out = Tensor::zeros(&[n, cout, ho, wo]);
    let in_per = c * h * w;
    let out_per = cout * ho * wo;
    if geom.transposed {
        // col = Wᵀ·x over (cout·k·k) × (h·w), folded onto the larger output grid.
        let mut cols = vec![T::zero(); cout * k * k * h * w];
        for s in 0..n {
            let xs = &x.data()[s * in_per..(s + 1) * in_per];
            matmul_tn(cout * k * k, c, h * w, weight, xs, &mut cols, false);
            let os = &mut out.data_mut()[s * out_per..(s + 1) * out_per];
            col2im(&cols, cout, ho, wo, k, geom.stride, geom.pad, h, w, os);
        }
    } else {
        let mut cols = vec![T::zero(); c * k * k * ho * wo];
        for s in 0..n {
            let xs = &x.data()[s * in_per..(s + 1) * in_per];
            im2col(xs, c, h, w, k, geom.stride, geom.pad, ho, wo, &mut cols);
            let os = &mut out.data_mut()[s * out_per..(s + 1) * out_per];
            matmul(cout, c * k * k, ho * wo, weight, &cols, os, false);
        }
    }
    let plane = ho * wo;
    for s in 0..n {
        for (co, b) in bias.iter().enumerate() {
            let start = s * out_per + co * plane;
            out.data_mut()[start..start + plane].iter_mut().for_each(|v| *v += *b);
        }
    }
    out
}

/// Gradient buffers for one convolution's weight and bias.
pub struct ConvGrads<'a, T> {
    pub weight: &'a mut [T],
    pub bias: &'a mut [T],
}

/// Backward pass of [`conv_forward`]. Accumulates into `grads` when given;
/// returns the input gradient when `need_input_grad`.
pub fn conv_backward<T: Real>(
    geom: &ConvGeom,
    x: &Tensor<T>,
    weight: &[T],
    dy: &Tensor<T>,
    mut grads: Option<ConvGrads<'_, T>>,
    need_input_grad: bool,
) -> Option<Tensor<T>> {
    let (n, c, h, w) = x.dims4();
    let (_, cout, ho, wo) = dy.dims4();
    let k = geom.kernel;
    let in_per = c * h * w;
    let out_per = cout * ho * wo;
    let mut dx = need_input_grad.then(|| Tensor::zeros(x.shape()));

    if let Some(g) = grads.as_mut() {
        let plane = ho * wo;
        for s in 0..n {
            for co in 0..cout {
                let start = s * out_per + co * plane;
                let sum: T = dy.data()[start..start + plane].iter().copied().sum();
                g.bias[co] += sum;
            }
        }
    }

    if geom.transposed {
        // Output grid is (ho, wo); the input grid (h, w) is its conv image.
        let mut cols = vec![T::zero(); cout * k * k * h * w];
        for s in 0..n {
            let dys = &dy.data()[s * out_per..(s + 1) * out_per];
            im2col(dys, cout, ho, wo, k, geom.stride, geom.pad, h, w, &mut cols);
            if let Some(g) = grads.as_mut() {
                let xs = &x.data()[s * in_per..(s + 1) * in_per];
                matmul_nt(c, h * w, cout * k * k, xs, &cols, g.weight, true);
            }
            if let Some(dx) = dx.as_mut() {
                let dxs = &mut dx.data_mut()[s * in_per..(s + 1) * in_per];
                matmul(c, cout * k * k, h * w, weight, &cols, dxs, false);
            }
        }
    } else {
        let mut cols = vec![T::zero(); c * k * k * ho * wo];
        let mut dcols = vec![T::zero(); c * k * k * ho * wo];
        for s in 0..n {
            let dys = &dy.data()[s * out_per..(s + 1) * out_per];
            if let Some(g) = grads.as_mut() {
                let xs = &x.data()[s * in_per..(s + 1) * in_per];
                im2col(xs, c, h, w, k, geom.stride, geom.pad, ho, wo, &mut cols);
                matmul_nt(cout, ho * wo, c * k * k, dys, &cols, g.weight, true);
            }
            if let Some(dx) = dx.as_mut() {
                matmul_tn(c * k * k, cout, ho * wo, weight, dys, &mut dcols, false);
                let dxs = &mut dx.data_mut()[s * in_per..(s + 1) * in_per];
                col2im(&dcols, c, h, w, k, geom.stride, geom.pad, ho, wo, dxs);
            }
        }
    }
    dx
}

/// Normalized activations and inverse std per `(sample, channel)` plane.
#[derive(Debug, Clone)]
pub struct NormCache<T> {
    xhat: Tensor<T>,
    inv_std: Vec<T>,
}

pub fn instance_norm_forward<T: Real>(x: &Tensor<T>, gamma: &[T], beta: &[T]) -> (Tensor<T>, NormCache<T>) {
    let (n, c, h, w) = x.dims4();
    let plane = h * w;
    let m = T::lit(plane as f64);
    let eps = T::lit(NORM_EPS);
    let mut xhat = Tensor::zeros(x.shape());
    let mut y = Tensor::zeros(x.shape());
    let mut inv_std = Vec::with_capacity(n * c);
    for s in 0..n {
        for ch in 0..c {
            let start = (s * c + ch) * plane;
            let src = &x.data()[start..start + plane];
            let mean = src.iter().copied().sum::<T>() / m;
            let var = src.iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>() / m;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            let xh = &mut xhat.data_mut()[start..start + plane];
            for (d, v) in xh.iter_mut().zip(src) {
                *d = (*v - mean) * is;
            }
            let (g, b) = (gamma[ch], beta[ch]);
            for (d, v) in y.data_mut()[start..start + plane].iter_mut().zip(&xhat.data()[start..start + plane]) {
                *d = g * *v + b;
            }
        }
    }
    (y, NormCache { xhat, inv_std })
}

pub fn instance_norm_backward<T: Real>(
    cache: &NormCache<T>,
    gamma: &[T],
    dy: &Tensor<T>,
    grads: Option<(&mut [T], &mut [T])>,
) -> Tensor<T> {
    let (n, c, h, w) = dy.dims4();
    let plane = h * w;
    let m = T::lit(plane as f64);
    let mut dx = Tensor::zeros(dy.shape());
    let mut grads = grads;
    for s in 0..n {
        for ch in 0..c {
            let start = (s * c + ch) * plane;
            let dys = &dy.data()[start..start + plane];
            let xh = &cache.xhat.data()[start..start + plane];
            let sum_dy: T = dys.iter().copied().sum();
            let sum_dy_xh: T = dys.iter().zip(xh).map(|(a, b)| *a * *b).sum();
            if let Some((dg, db)) = grads.as_mut() {
                dg[ch] += sum_dy_xh;
                db[ch] += sum_dy;
            }
            let g = gamma[ch];
            let scale = g * cache.inv_std[s * c + ch] / m;
            let dst = &mut dx.data_mut()[start..start + plane];
            for ((d, dyv), xv) in dst.iter_mut().zip(dys).zip(xh) {
                *d = scale * (m * *dyv - sum_dy - *xv * sum_dy_xh);
            }
        }
    }
    dx
}

pub fn activate<T: Real>(act: Activation, x: &mut Tensor<T>) {
    match act {
        Activation::Identity => {}
        Activation::LeakyRelu => {
            let slope = T::lit(LEAKY_SLOPE);
            x.data_mut().iter_mut().for_each(|v| {
                if *v < T::zero() {
                    *v = *v * slope
                }
            });
        }
        Activation::Tanh => x.data_mut().iter_mut().for_each(|v| *v = v.tanh()),
    }
}

/// Multiplies `dy` in place by the activation derivative, read off the
/// activation output `y` (valid because both activations are monotone).
pub fn activate_backward<T: Real>(act: Activation, y: &Tensor<T>, dy: &mut Tensor<T>) {
    match act {
        Activation::Identity => {}
        Activation::LeakyRelu => {
            let slope = T::lit(LEAKY_SLOPE);
            for (d, v) in dy.data_mut().iter_mut().zip(y.data()) {
                if *v < T::zero() {
                    *d = *d * slope;
                }
            }
        }
        Activation::Tanh => {
            for (d, v) in dy.data_mut().iter_mut().zip(y.data()) {
                *d = *d * (T::one() - *v * *v);
            }
        }
    }
}

/// Mean over each `(sample, channel)` plane: `(n, c, h, w) -> n × c`.
pub fn global_avg_pool<T: Real>(x: &Tensor<T>) -> Vec<T> {
    let (n, c, h, w) = x.dims4();
    let plane = h * w;
    let m = T::lit(plane as f64);
    (0..n * c)
        .map(|i| x.data()[i * plane..(i + 1) * plane].iter().copied().sum::<T>() / m)
        .collect()
}

pub fn global_avg_pool_backward<T: Real>(shape: &[usize], dpooled: &[T]) -> Tensor<T> {
    let plane = shape[2] * shape[3];
    let m = T::lit(plane as f64);
    let mut dx = Tensor::zeros(shape);
    for (i, g) in dpooled.iter().enumerate() {
        dx.data_mut()[i * plane..(i + 1) * plane].iter_mut().for_each(|v| *v = *g / m);
    }
    dx
}

pub fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Row-wise softmax of an `rows × cols` matrix.
pub fn softmax_rows<T: Real>(logits: &[T], cols: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(cols) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let start = out.len();
        out.extend(row.iter().map(|v| (*v - max).exp()));
        let total: T = out[start..].iter().copied().sum();
        out[start..].iter_mut().for_each(|v| *v /= total);
    }
    out
}

/// Chains a gradient w.r.t. softmax outputs back to the logits.
pub fn softmax_rows_backward<T: Real>(probs: &[T], dprobs: &[T], cols: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(probs.len());
    for (p, g) in probs.chunks(cols).zip(dprobs.chunks(cols)) {
        let dot: T = p.iter().zip(g).map(|(a, b)| *a * *b).sum();
        out.extend(p.iter().zip(g).map(|(a, b)| *a * (*b - dot)));
    }
    out
}
