//! Forward and backward kernels for the layer kinds used by the networks.
//!
//! Convolutions go through im2col + GEMM, processed in chunks of output rows so
//! the column buffer stays bounded at full resolution. Every kernel has a fixed
//! reduction order, so results are bitwise reproducible.

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

/// Upper bound on the number of f64 values in one im2col buffer.
const COL_CHUNK: usize = 1 << 20;

/// Output size of a "same"-padded stride-`s` window over `n` pixels.
pub fn same_out(n: usize, stride: usize) -> usize {
    n.div_ceil(stride)
}

fn same_pad_total(n: usize, out: usize, kernel: usize, stride: usize, dilation: usize) -> usize {
    let span = (out - 1) * stride + (kernel - 1) * dilation + 1;
    span.saturating_sub(n)
}

/// Geometry of a strided, dilated 2-D window over an `in_h x in_w` plane with
/// "same" padding (output `ceil(n / stride)`, extra padding at the bottom/right).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

impl ConvGeometry {
    pub fn same(in_h: usize, in_w: usize, kernel: usize, stride: usize, dilation: usize) -> Self {
        let out_h = same_out(in_h, stride);
        let out_w = same_out(in_w, stride);
        Self {
            in_h,
            in_w,
            out_h,
            out_w,
            kernel,
            stride,
            dilation,
            pad_top: same_pad_total(in_h, out_h, kernel, stride, dilation) / 2,
            pad_left: same_pad_total(in_w, out_w, kernel, stride, dilation) / 2,
        }
    }

    /// Input coordinate of kernel tap `t` for output coordinate `o`, if inside the plane.
    #[inline]
    fn src(&self, o: usize, t: usize, pad: usize, len: usize) -> Option<usize> {
        let p = o * self.stride + t * self.dilation;
        if p < pad || p - pad >= len {
            None
        } else {
            Some(p - pad)
        }
    }

    fn rows_per_chunk(&self, k_rows: usize) -> usize {
        (COL_CHUNK / (k_rows * self.out_w).max(1)).clamp(1, self.out_h)
    }
}

/// Unfolds output rows `[oy0, oy1)` of `x` (`channels x in_h x in_w`) into
/// `col` laid out `[channels * k * k][(oy1 - oy0) * out_w]`.
fn im2col(x: &[f64], channels: usize, g: &ConvGeometry, oy0: usize, oy1: usize, col: &mut [f64]) {
    let k = g.kernel;
    let p = (oy1 - oy0) * g.out_w;
    let plane = g.in_h * g.in_w;
    for ci in 0..channels {
        let xc = &x[ci * plane..(ci + 1) * plane];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut col[row * p..(row + 1) * p];
                for (j, oy) in (oy0..oy1).enumerate() {
                    let d = &mut dst[j * g.out_w..(j + 1) * g.out_w];
                    match g.src(oy, ky, g.pad_top, g.in_h) {
                        None => d.fill(0.0),
                        Some(iy) => {
                            let xr = &xc[iy * g.in_w..(iy + 1) * g.in_w];
                            for (ox, v) in d.iter_mut().enumerate() {
                                *v = match g.src(ox, kx, g.pad_left, g.in_w) {
                                    Some(ix) => xr[ix],
                                    None => 0.0,
                                };
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates `col` back into `x`.
fn col2im(col: &[f64], channels: usize, g: &ConvGeometry, oy0: usize, oy1: usize, x: &mut [f64]) {
    let k = g.kernel;
    let p = (oy1 - oy0) * g.out_w;
    let plane = g.in_h * g.in_w;
    for ci in 0..channels {
        let xc = &mut x[ci * plane..(ci + 1) * plane];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &col[row * p..(row + 1) * p];
                for (j, oy) in (oy0..oy1).enumerate() {
                    let Some(iy) = g.src(oy, ky, g.pad_top, g.in_h) else {
                        continue;
                    };
                    let s = &src[j * g.out_w..(j + 1) * g.out_w];
                    let xr = &mut xc[iy * g.in_w..(iy + 1) * g.in_w];
                    for (ox, v) in s.iter().enumerate() {
                        if let Some(ix) = g.src(ox, kx, g.pad_left, g.in_w) {
                            xr[ix] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Strided matrix view: element `(i, j)` lives at `offset + i * rs + j * cs`.
#[derive(Clone, Copy)]
struct Mat {
    rs: isize,
    cs: isize,
}

const ROW_MAJOR: fn(usize) -> Mat = |cols| Mat {
    rs: cols as isize,
    cs: 1,
};
const TRANSPOSED: fn(usize) -> Mat = |cols| Mat {
    rs: 1,
    cs: cols as isize,
};

/// `c = alpha * a * b + beta * c` with `a: m x k`, `b: k x n`, `c: m x n`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    la: Mat,
    b: &[f64],
    lb: Mat,
    beta: f64,
    c: &mut [f64],
    lc: Mat,
) {
    if m == 0 || n == 0 {
        return;
    }
    let extent = |rows: usize, cols: usize, l: Mat| {
        (rows - 1) * l.rs as usize + (cols - 1) * l.cs as usize + 1
    };
    if k > 0 {
        assert!(a.len() >= extent(m, k, la) && b.len() >= extent(k, n, lb));
    }
    assert!(c.len() >= extent(m, n, lc));
    // SAFETY: the asserts above keep every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            la.rs,
            la.cs,
            b.as_ptr(),
            lb.rs,
            lb.cs,
            beta,
            c.as_mut_ptr(),
            lc.rs,
            lc.cs,
        );
    }
}

/// Convolution. `weight` is `[cout][cin][k][k]`.
pub fn conv2d_forward(x: &Tensor, weight: &[f64], bias: &[f64], cout: usize, g: &ConvGeometry) -> Tensor {
    let [n, cin, _, _] = x.shape;
    let kk = cin * g.kernel * g.kernel;
    let plane_out = g.out_h * g.out_w;
    let mut out = Tensor::zeros([n, cout, g.out_h, g.out_w]);
    let rows = g.rows_per_chunk(kk);
    let mut col = vec![0.0; kk * rows * g.out_w];
    for i in 0..n {
        let xs = x.sample(i);
        let os = out.sample_mut(i);
        let mut oy0 = 0;
        while oy0 < g.out_h {
            let oy1 = (oy0 + rows).min(g.out_h);
            let p = (oy1 - oy0) * g.out_w;
            im2col(xs, cin, g, oy0, oy1, &mut col[..kk * p]);
            gemm(
                cout,
                kk,
                p,
                weight,
                ROW_MAJOR(kk),
                &col[..kk * p],
                ROW_MAJOR(p),
                0.0,
                &mut os[oy0 * g.out_w..],
                ROW_MAJOR(plane_out),
            );
            oy0 = oy1;
        }
        for (co, b) in bias.iter().enumerate() {
            for v in &mut os[co * plane_out..(co + 1) * plane_out] {
                *v += b;
            }
        }
    }
    out
}

/// Backward of [`conv2d_forward`]. Accumulates into `dw`/`db`; returns the
/// input gradient when requested.
pub fn conv2d_backward(
    x: &Tensor,
    weight: &[f64],
    dout: &Tensor,
    g: &ConvGeometry,
    dw: &mut [f64],
    db: &mut [f64],
    want_dx: bool,
) -> Option<Tensor> {
    let [n, cin, _, _] = x.shape;
    let cout = dout.shape[1];
    let kk = cin * g.kernel * g.kernel;
    let plane_out = g.out_h * g.out_w;
    let rows = g.rows_per_chunk(kk);
    let mut col = vec![0.0; kk * rows * g.out_w];
    let mut dx = want_dx.then(|| Tensor::zeros(x.shape));
    for i in 0..n {
        let xs = x.sample(i);
        let ds = dout.sample(i);
        for (co, b) in db.iter_mut().enumerate() {
            *b += ds[co * plane_out..(co + 1) * plane_out].iter().sum::<f64>();
        }
        let mut oy0 = 0;
        while oy0 < g.out_h {
            let oy1 = (oy0 + rows).min(g.out_h);
            let p = (oy1 - oy0) * g.out_w;
            let dchunk = &ds[oy0 * g.out_w..];
            im2col(xs, cin, g, oy0, oy1, &mut col[..kk * p]);
            // dW[cout, kk] += dOut[cout, p] * col^T[p, kk]
            gemm(
                cout,
                p,
                kk,
                dchunk,
                ROW_MAJOR(plane_out),
                &col[..kk * p],
                TRANSPOSED(p),
                1.0,
                dw,
                ROW_MAJOR(kk),
            );
            if let Some(dx) = dx.as_mut() {
                // dcol[kk, p] = W^T[kk, cout] * dOut[cout, p]
                gemm(
                    kk,
                    cout,
                    p,
                    weight,
                    TRANSPOSED(kk),
                    dchunk,
                    ROW_MAJOR(plane_out),
                    0.0,
                    &mut col[..kk * p],
                    ROW_MAJOR(p),
                );
                col2im(&col[..kk * p], cin, g, oy0, oy1, dx.sample_mut(i));
            }
            oy0 = oy1;
        }
    }
    dx
}

/// Transposed convolution. `g` is the geometry of the matching forward
/// convolution (large plane -> small plane); `x` lives on the small plane.
/// `weight` is `[cin][cout][k][k]`.
pub fn deconv2d_forward(x: &Tensor, weight: &[f64], bias: &[f64], cout: usize, g: &ConvGeometry) -> Tensor {
    let [n, cin, _, _] = x.shape;
    let kk = cout * g.kernel * g.kernel;
    let plane_small = g.out_h * g.out_w;
    let plane_big = g.in_h * g.in_w;
    let mut out = Tensor::zeros([n, cout, g.in_h, g.in_w]);
    let rows = g.rows_per_chunk(kk);
    let mut col = vec![0.0; kk * rows * g.out_w];
    for i in 0..n {
        let xs = x.sample(i);
        let os = out.sample_mut(i);
        let mut oy0 = 0;
        while oy0 < g.out_h {
            let oy1 = (oy0 + rows).min(g.out_h);
            let p = (oy1 - oy0) * g.out_w;
            // col[kk, p] = W^T[kk, cin] * x[cin, p]
            gemm(
                kk,
                cin,
                p,
                weight,
                TRANSPOSED(kk),
                &xs[oy0 * g.out_w..],
                ROW_MAJOR(plane_small),
                0.0,
                &mut col[..kk * p],
                ROW_MAJOR(p),
            );
            col2im(&col[..kk * p], cout, g, oy0, oy1, os);
            oy0 = oy1;
        }
        for (co, b) in bias.iter().enumerate() {
            for v in &mut os[co * plane_big..(co + 1) * plane_big] {
                *v += b;
            }
        }
    }
    out
}

pub fn deconv2d_backward(
    x: &Tensor,
    weight: &[f64],
    dout: &Tensor,
    g: &ConvGeometry,
    dw: &mut [f64],
    db: &mut [f64],
    want_dx: bool,
) -> Option<Tensor> {
    let [n, cin, _, _] = x.shape;
    let cout = dout.shape[1];
    let kk = cout * g.kernel * g.kernel;
    let plane_small = g.out_h * g.out_w;
    let plane_big = g.in_h * g.in_w;
    let rows = g.rows_per_chunk(kk);
    let mut col = vec![0.0; kk * rows * g.out_w];
    let mut dx = want_dx.then(|| Tensor::zeros(x.shape));
    for i in 0..n {
        let xs = x.sample(i);
        let ds = dout.sample(i);
        for (co, b) in db.iter_mut().enumerate() {
            *b += ds[co * plane_big..(co + 1) * plane_big].iter().sum::<f64>();
        }
        let mut oy0 = 0;
        while oy0 < g.out_h {
            let oy1 = (oy0 + rows).min(g.out_h);
            let p = (oy1 - oy0) * g.out_w;
            im2col(ds, cout, g, oy0, oy1, &mut col[..kk * p]);
            // dW[cin, kk] += x[cin, p] * dcol^T[p, kk]
            gemm(
                cin,
                p,
                kk,
                &xs[oy0 * g.out_w..],
                ROW_MAJOR(plane_small),
                &col[..kk * p],
                TRANSPOSED(p),
                1.0,
                dw,
                ROW_MAJOR(kk),
            );
            if let Some(dx) = dx.as_mut() {
                // dx[cin, p] = W[cin, kk] * dcol[kk, p]
                gemm(
                    cin,
                    kk,
                    p,
                    weight,
                    ROW_MAJOR(kk),
                    &col[..kk * p],
                    ROW_MAJOR(p),
                    0.0,
                    &mut dx.sample_mut(i)[oy0 * g.out_w..],
                    ROW_MAJOR(plane_small),
                );
            }
            oy0 = oy1;
        }
    }
    dx
}

/// Max pooling with "same" padding. Returns the output and, per output value,
/// the flat in-plane index of the winning input (first maximum on ties).
pub fn maxpool_forward(x: &Tensor, g: &ConvGeometry) -> (Tensor, Vec<u32>) {
    let [n, c, _, _] = x.shape;
    let mut out = Tensor::zeros([n, c, g.out_h, g.out_w]);
    let mut arg = vec![0u32; out.data.len()];
    let plane_in = g.in_h * g.in_w;
    let plane_out = g.out_h * g.out_w;
    for nc in 0..n * c {
        let xp = &x.data[nc * plane_in..(nc + 1) * plane_in];
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let mut best = f64::NEG_INFINITY;
                let mut best_i = usize::MAX;
                for ky in 0..g.kernel {
                    let Some(iy) = g.src(oy, ky, g.pad_top, g.in_h) else {
                        continue;
                    };
                    for kx in 0..g.kernel {
                        let Some(ix) = g.src(ox, kx, g.pad_left, g.in_w) else {
                            continue;
                        };
                        let v = xp[iy * g.in_w + ix];
                        if best_i == usize::MAX || v > best {
                            best = v;
                            best_i = iy * g.in_w + ix;
                        }
                    }
                }
                let o = nc * plane_out + oy * g.out_w + ox;
                out.data[o] = best;
                arg[o] = best_i as u32;
            }
        }
    }
    (out, arg)
}

pub fn maxpool_backward(in_shape: [usize; 4], arg: &[u32], dout: &Tensor) -> Tensor {
    let mut dx = Tensor::zeros(in_shape);
    let plane_in = in_shape[2] * in_shape[3];
    let plane_out = dout.shape[2] * dout.shape[3];
    for nc in 0..in_shape[0] * in_shape[1] {
        for j in 0..plane_out {
            let o = nc * plane_out + j;
            dx.data[nc * plane_in + arg[o] as usize] += dout.data[o];
        }
    }
    dx
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    #[default]
    Nearest,
    Bilinear,
}

/// Per-axis resampling taps: output coordinate -> two (source, weight) pairs.
fn resample_taps(len_in: usize, factor: usize, mode: Interpolation) -> Vec<[(usize, f64); 2]> {
    (0..len_in * factor)
        .map(|o| match mode {
            Interpolation::Nearest => [(o / factor, 1.0), (0, 0.0)],
            Interpolation::Bilinear => {
                // half-pixel centers, edge clamped
                let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
                let i0 = (src.floor() as usize).min(len_in - 1);
                let i1 = (i0 + 1).min(len_in - 1);
                let t = src - i0 as f64;
                [(i0, 1.0 - t), (i1, t)]
            }
        })
        .collect()
}

pub fn upsample_forward(x: &Tensor, factor: usize, mode: Interpolation) -> Tensor {
    let [n, c, h, w] = x.shape;
    if factor == 1 {
        return x.clone();
    }
    let ty = resample_taps(h, factor, mode);
    let tx = resample_taps(w, factor, mode);
    let (oh, ow) = (h * factor, w * factor);
    let mut out = Tensor::zeros([n, c, oh, ow]);
    for nc in 0..n * c {
        let xp = &x.data[nc * h * w..(nc + 1) * h * w];
        let op = &mut out.data[nc * oh * ow..(nc + 1) * oh * ow];
        for (oy, tyy) in ty.iter().enumerate() {
            for (ox, txx) in tx.iter().enumerate() {
                let mut acc = 0.0;
                for &(sy, wy) in tyy {
                    for &(sx, wx) in txx {
                        acc += wy * wx * xp[sy * w + sx];
                    }
                }
                op[oy * ow + ox] = acc;
            }
        }
    }
    out
}

pub fn upsample_backward(in_shape: [usize; 4], factor: usize, mode: Interpolation, dout: &Tensor) -> Tensor {
    let [n, c, h, w] = in_shape;
    if factor == 1 {
        return dout.clone();
    }
    let ty = resample_taps(h, factor, mode);
    let tx = resample_taps(w, factor, mode);
    let (oh, ow) = (h * factor, w * factor);
    let mut dx = Tensor::zeros(in_shape);
    for nc in 0..n * c {
        let dp = &dout.data[nc * oh * ow..(nc + 1) * oh * ow];
        let xp = &mut dx.data[nc * h * w..(nc + 1) * h * w];
        for (oy, tyy) in ty.iter().enumerate() {
            for (ox, txx) in tx.iter().enumerate() {
                let g = dp[oy * ow + ox];
                for &(sy, wy) in tyy {
                    for &(sx, wx) in txx {
                        xp[sy * w + sx] += wy * wx * g;
                    }
                }
            }
        }
    }
    dx
}

/// Fully connected layer over the flattened sample. `weight` is `[out][in]`.
pub fn linear_forward(x: &Tensor, weight: &[f64], bias: &[f64], out_features: usize) -> Tensor {
    let n = x.batch();
    let f = x.sample_len();
    let mut out = Tensor::zeros([n, out_features, 1, 1]);
    // out[n, o] = x[n, f] * W^T[f, o]
    gemm(
        n,
        f,
        out_features,
        &x.data,
        ROW_MAJOR(f),
        weight,
        TRANSPOSED(f),
        0.0,
        &mut out.data,
        ROW_MAJOR(out_features),
    );
    for i in 0..n {
        for (o, b) in bias.iter().enumerate() {
            out.data[i * out_features + o] += b;
        }
    }
    out
}

pub fn linear_backward(
    x: &Tensor,
    weight: &[f64],
    dout: &Tensor,
    dw: &mut [f64],
    db: &mut [f64],
    want_dx: bool,
) -> Option<Tensor> {
    let n = x.batch();
    let f = x.sample_len();
    let o = dout.sample_len();
    for i in 0..n {
        for (j, b) in db.iter_mut().enumerate() {
            *b += dout.data[i * o + j];
        }
    }
    // dW[o, f] += dout^T[o, n] * x[n, f]
    gemm(o, n, f, &dout.data, TRANSPOSED(o), &x.data, ROW_MAJOR(f), 1.0, dw, ROW_MAJOR(f));
    want_dx.then(|| {
        let mut dx = Tensor::zeros(x.shape);
        gemm(n, o, f, &dout.data, ROW_MAJOR(o), weight, ROW_MAJOR(f), 0.0, &mut dx.data, ROW_MAJOR(f));
        dx
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    LeakyRelu,
    Relu,
    Tanh,
    Sigmoid,
    #[default]
    None,
}

impl Activation {
    pub fn apply(self, t: &mut Tensor, leaky_slope: f64) {
        match self {
            Activation::None => {}
            Activation::Relu => t.data.iter_mut().for_each(|v| *v = v.max(0.0)),
            Activation::LeakyRelu => t.data.iter_mut().for_each(|v| {
                if *v < 0.0 {
                    *v *= leaky_slope
                }
            }),
            Activation::Tanh => t.data.iter_mut().for_each(|v| *v = v.tanh()),
            Activation::Sigmoid => t.data.iter_mut().for_each(|v| *v = sigmoid(*v)),
        }
    }

    /// Turns `grad` (w.r.t. the activation output `y`) into the gradient
    /// w.r.t. the pre-activation. The kinks take the zero-side derivative.
    pub fn backward(self, y: &Tensor, grad: &mut Tensor, leaky_slope: f64) {
        let it = grad.data.iter_mut().zip(&y.data);
        match self {
            Activation::None => {}
            Activation::Relu => it.for_each(|(g, &y)| {
                if y <= 0.0 {
                    *g = 0.0
                }
            }),
            Activation::LeakyRelu => it.for_each(|(g, &y)| {
                if y <= 0.0 {
                    *g *= leaky_slope
                }
            }),
            Activation::Tanh => it.for_each(|(g, &y)| *g *= 1.0 - y * y),
            Activation::Sigmoid => it.for_each(|(g, &y)| *g *= y * (1.0 - y)),
        }
    }

    pub fn has_kink(self) -> bool {
        matches!(self, Activation::Relu | Activation::LeakyRelu)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
