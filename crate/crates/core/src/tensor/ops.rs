//! Forward and backward kernels.
//!
//! Each forward kernel is a pure function over [`Tensor`] values. The
//! matching `*_backward` kernel takes the upstream gradient and whatever
//! forward values it needs, and returns the gradients of the inputs.
//!
//! Summation order inside every kernel is fixed, so results are bitwise
//! reproducible regardless of how many worker threads rayon is given.

use rayon::prelude::*;

use super::{Shape, Tensor};
use crate::error::{Error, Result};

fn ensure_finite(t: &Tensor, op: &'static str) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

// ---------------------------------------------------------------------------
// conv2d
// ---------------------------------------------------------------------------

/// Geometry of a stride-1 convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_c: usize,
    pub out_c: usize,
    pub kh: usize,
    pub kw: usize,
    pub padding: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    fn patch_len(&self) -> usize {
        self.in_c * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    /// A 1x1 kernel without padding reads its input directly as the column
    /// matrix.
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.padding == 0
    }
}

pub fn conv_geometry(
    input: Shape,
    weight: Shape,
    bias: Option<Shape>,
    stride: usize,
    padding: usize,
) -> Result<ConvGeometry> {
    let [out_c, in_c, kh, kw] = weight.0;
    if stride != 1 {
        return Err(Error::dim("conv2d", format!("stride must be 1, got {stride}")));
    }
    if input.channels() != in_c {
        return Err(Error::dim(
            "conv2d",
            format!(
                "input has {} channels but weight {} expects {in_c}",
                input.channels(),
                weight
            ),
        ));
    }
    for k in [kh, kw] {
        if k != 1 && k != 3 {
            return Err(Error::dim("conv2d", format!("kernel size must be 1 or 3, got {kh}x{kw}")));
        }
        if padding != 0 && padding != (k - 1) / 2 {
            return Err(Error::dim(
                "conv2d",
                format!("padding {padding} invalid for kernel size {k}"),
            ));
        }
    }
    if let Some(b) = bias {
        if b.numel() != out_c {
            return Err(Error::dim(
                "conv2d",
                format!("bias {b} does not match {out_c} output channels"),
            ));
        }
    }
    let (in_h, in_w) = (input.height(), input.width());
    if in_h + 2 * padding < kh || in_w + 2 * padding < kw {
        return Err(Error::dim(
            "conv2d",
            format!("input {input} smaller than kernel {kh}x{kw}"),
        ));
    }
    Ok(ConvGeometry {
        in_c,
        out_c,
        kh,
        kw,
        padding,
        in_h,
        in_w,
        out_h: in_h + 2 * padding - kh + 1,
        out_w: in_w + 2 * padding - kw + 1,
    })
}

/// Unfolds one `(C, H, W)` sample into a `(C*kh*kw, out_h*out_w)` matrix.
fn im2col(g: &ConvGeometry, sample: &[f64], col: &mut [f64]) {
    let plane_in = g.in_h * g.in_w;
    let plane_out = g.out_plane();
    let pad = g.padding as isize;
    let mut row = 0;
    for c in 0..g.in_c {
        let src = &sample[c * plane_in..(c + 1) * plane_in];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let dst = &mut col[row * plane_out..(row + 1) * plane_out];
                let dx = kx as isize - pad;
                // valid output columns: 0 <= x + dx < in_w
                let x_lo = (-dx).max(0) as usize;
                let x_hi = ((g.in_w as isize - dx).min(g.out_w as isize)).max(0) as usize;
                for y in 0..g.out_h {
                    let sy = y as isize + ky as isize - pad;
                    let out_row = &mut dst[y * g.out_w..(y + 1) * g.out_w];
                    if sy < 0 || sy >= g.in_h as isize || x_lo >= x_hi {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src_row = &src[sy as usize * g.in_w..(sy as usize + 1) * g.in_w];
                    out_row[..x_lo].fill(0.0);
                    let s0 = (x_lo as isize + dx) as usize;
                    out_row[x_lo..x_hi].copy_from_slice(&src_row[s0..s0 + (x_hi - x_lo)]);
                    out_row[x_hi..].fill(0.0);
                }
                row += 1;
            }
        }
    }
}

/// Folds a column-gradient matrix back onto the `(C, H, W)` input layout.
fn col2im(g: &ConvGeometry, col: &[f64], sample_grad: &mut [f64]) {
    let plane_in = g.in_h * g.in_w;
    let plane_out = g.out_plane();
    let pad = g.padding as isize;
    let mut row = 0;
    for c in 0..g.in_c {
        let dst = &mut sample_grad[c * plane_in..(c + 1) * plane_in];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let src = &col[row * plane_out..(row + 1) * plane_out];
                let dx = kx as isize - pad;
                let x_lo = (-dx).max(0) as usize;
                let x_hi = ((g.in_w as isize - dx).min(g.out_w as isize)).max(0) as usize;
                for y in 0..g.out_h {
                    let sy = y as isize + ky as isize - pad;
                    if sy < 0 || sy >= g.in_h as isize || x_lo >= x_hi {
                        continue;
                    }
                    let d0 = sy as usize * g.in_w + (x_lo as isize + dx) as usize;
                    let s = &src[y * g.out_w + x_lo..y * g.out_w + x_hi];
                    for (d, v) in dst[d0..d0 + s.len()].iter_mut().zip(s) {
                        *d += v;
                    }
                }
                row += 1;
            }
        }
    }
}

/// `c = a * b (+ c when accumulate)` for row-major matrices given by strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert!(c.len() >= m * n);
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the slices cover the index ranges implied by the dimensions and
    // strides passed by every caller in this module; `c` is exclusively
    // borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Stride-1 2-D cross-correlation with zero padding.
pub fn conv2d(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let g = conv_geometry(
        input.shape(),
        weight.shape(),
        bias.map(Tensor::shape),
        stride,
        padding,
    )?;
    ensure_finite(weight, "conv2d weight")?;
    if let Some(b) = bias {
        ensure_finite(b, "conv2d bias")?;
    }
    let batch = input.shape().batch();
    let in_per = g.in_c * g.in_h * g.in_w;
    let out_per = g.out_c * g.out_plane();
    let k = g.patch_len();
    let p = g.out_plane();
    let mut out = vec![0.0; batch * out_per];
    out.par_chunks_mut(out_per)
        .enumerate()
        .for_each(|(bi, dst)| {
            let sample = &input.data()[bi * in_per..(bi + 1) * in_per];
            let col_buf;
            let col: &[f64] = if g.is_pointwise() {
                sample
            } else {
                let mut buf = vec![0.0; k * p];
                im2col(&g, sample, &mut buf);
                col_buf = buf;
                &col_buf
            };
            gemm(
                g.out_c,
                k,
                p,
                weight.data(),
                (k as isize, 1),
                col,
                (p as isize, 1),
                dst,
                false,
            );
            if let Some(b) = bias {
                for (o, row) in dst.chunks_mut(p).enumerate() {
                    let bv = b.data()[o];
                    row.iter_mut().for_each(|v| *v += bv);
                }
            }
        });
    Ok(Tensor::from_raw(
        Shape::new(batch, g.out_c, g.out_h, g.out_w),
        out,
    ))
}

pub struct ConvGrads {
    pub input: Option<Tensor>,
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

/// Gradients of [`conv2d`] with respect to its input, weight and bias.
///
/// The weight gradient is reduced over the batch in ascending sample order.
pub fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    has_bias: bool,
    padding: usize,
    grad_out: &Tensor,
    need_input_grad: bool,
) -> Result<ConvGrads> {
    let g = conv_geometry(input.shape(), weight.shape(), None, 1, padding)?;
    let batch = input.shape().batch();
    let expected = Shape::new(batch, g.out_c, g.out_h, g.out_w);
    if grad_out.shape() != expected {
        return Err(Error::dim(
            "conv2d_backward",
            format!("gradient {} does not match output {expected}", grad_out.shape()),
        ));
    }
    let in_per = g.in_c * g.in_h * g.in_w;
    let out_per = g.out_c * g.out_plane();
    let k = g.patch_len();
    let p = g.out_plane();

    let per_sample: Vec<(Vec<f64>, Option<Vec<f64>>)> = (0..batch)
        .into_par_iter()
        .map(|bi| {
            let sample = &input.data()[bi * in_per..(bi + 1) * in_per];
            let gout = &grad_out.data()[bi * out_per..(bi + 1) * out_per];
            let col_buf;
            let col: &[f64] = if g.is_pointwise() {
                sample
            } else {
                let mut buf = vec![0.0; k * p];
                im2col(&g, sample, &mut buf);
                col_buf = buf;
                &col_buf
            };
            // dW[o, k] = sum_p gout[o, p] * col[k, p]
            let mut dw = vec![0.0; g.out_c * k];
            gemm(
                g.out_c,
                p,
                k,
                gout,
                (p as isize, 1),
                col,
                (1, p as isize),
                &mut dw,
                false,
            );
            let dx = need_input_grad.then(|| {
                // dcol[k, p] = sum_o W[o, k] * gout[o, p]
                let mut dcol = vec![0.0; k * p];
                gemm(
                    k,
                    g.out_c,
                    p,
                    weight.data(),
                    (1, k as isize),
                    gout,
                    (p as isize, 1),
                    &mut dcol,
                    false,
                );
                if g.is_pointwise() {
                    dcol
                } else {
                    let mut dx = vec![0.0; in_per];
                    col2im(&g, &dcol, &mut dx);
                    dx
                }
            });
            (dw, dx)
        })
        .collect();

    let mut dweight = vec![0.0; g.out_c * k];
    let mut dinput = need_input_grad.then(|| Vec::with_capacity(batch * in_per));
    for (dw, dx) in per_sample {
        dweight.iter_mut().zip(&dw).for_each(|(a, b)| *a += b);
        if let (Some(acc), Some(dx)) = (dinput.as_mut(), dx) {
            acc.extend_from_slice(&dx);
        }
    }
    let dbias = has_bias.then(|| {
        let mut db = vec![0.0; g.out_c];
        for bi in 0..batch {
            for (o, d) in db.iter_mut().enumerate() {
                let start = bi * out_per + o * p;
                *d += grad_out.data()[start..start + p].iter().sum::<f64>();
            }
        }
        Tensor::from_raw(Shape::new(1, g.out_c, 1, 1), db)
    });
    Ok(ConvGrads {
        input: dinput.map(|d| Tensor::from_raw(input.shape(), d)),
        weight: Tensor::from_raw(weight.shape(), dweight),
        bias: dbias,
    })
}

// ---------------------------------------------------------------------------
// pointwise nonlinearities
// ---------------------------------------------------------------------------

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// The subgradient at exactly zero is taken as 0.
pub fn relu_backward(x: &Tensor, grad_out: &Tensor) -> Tensor {
    let data = x
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::from_raw(x.shape(), data)
}

/// Largest `f64` strictly below one.
const BELOW_ONE: f64 = 1.0 - f64::EPSILON / 2.0;

/// Logistic function, evaluated without overflow and kept inside the open
/// interval `(0, 1)` for every finite input.
pub fn sigmoid_scalar(x: f64) -> f64 {
    let y = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    y.clamp(f64::MIN_POSITIVE, BELOW_ONE)
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(sigmoid_scalar)
}

/// Backward pass expressed through the forward output `y`.
pub fn sigmoid_backward(y: &Tensor, grad_out: &Tensor) -> Tensor {
    let data = y
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&s, &g)| g * s * (1.0 - s))
        .collect();
    Tensor::from_raw(y.shape(), data)
}

// ---------------------------------------------------------------------------
// softmax
// ---------------------------------------------------------------------------

/// Softmax of a vector with max-subtraction.
pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::dim("softmax", "empty input"));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite { op: "softmax" });
    }
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|&x| (x - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    Ok(exps
        .into_iter()
        .map(|e| (e / z).max(f64::MIN_POSITIVE))
        .collect())
}

/// Softmax over the channel axis of a `(B, N, 1, 1)` tensor.
pub fn softmax_channels(x: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    if s.plane() != 1 {
        return Err(Error::dim(
            "softmax",
            format!("expected (B, N, 1, 1), got {s}"),
        ));
    }
    let n = s.channels();
    let mut out = Vec::with_capacity(s.numel());
    for row in x.data().chunks(n) {
        out.extend(softmax(row)?);
    }
    Ok(Tensor::from_raw(s, out))
}

pub fn softmax_channels_backward(y: &Tensor, grad_out: &Tensor) -> Tensor {
    let n = y.shape().channels();
    let mut out = Vec::with_capacity(y.numel());
    for (yr, gr) in y.data().chunks(n).zip(grad_out.data().chunks(n)) {
        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        out.extend(yr.iter().zip(gr).map(|(&yi, &gi)| yi * (gi - dot)));
    }
    Tensor::from_raw(y.shape(), out)
}

// ---------------------------------------------------------------------------
// pooling and affine maps
// ---------------------------------------------------------------------------

pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    let n = s.plane();
    if n == 0 {
        return Err(Error::dim("global_avg_pool", format!("empty spatial extent in {s}")));
    }
    let data = x
        .data()
        .chunks(n)
        .map(|plane| plane.iter().sum::<f64>() / n as f64)
        .collect();
    Ok(Tensor::from_raw(
        Shape::new(s.batch(), s.channels(), 1, 1),
        data,
    ))
}

pub fn global_avg_pool_backward(input_shape: Shape, grad_out: &Tensor) -> Tensor {
    let n = input_shape.plane();
    let mut data = Vec::with_capacity(input_shape.numel());
    for &g in grad_out.data() {
        data.extend(std::iter::repeat(g / n as f64).take(n));
    }
    Tensor::from_raw(input_shape, data)
}

fn linear_dims(x: Shape, weight: Shape, bias: Option<Shape>) -> Result<(usize, usize)> {
    let [out_f, in_f, wh, ww] = weight.0;
    if wh != 1 || ww != 1 {
        return Err(Error::dim("linear", format!("weight must be (out, in, 1, 1), got {weight}")));
    }
    if x.plane() != 1 || x.channels() != in_f {
        return Err(Error::dim(
            "linear",
            format!("input {x} does not match weight {weight}"),
        ));
    }
    if let Some(b) = bias {
        if b.numel() != out_f {
            return Err(Error::dim("linear", format!("bias {b} does not match {out_f} outputs")));
        }
    }
    Ok((in_f, out_f))
}

/// Affine map `W x + b` applied to every sample of a `(B, in, 1, 1)` tensor.
/// The weight is stored as `(out, in, 1, 1)`.
pub fn linear(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (in_f, out_f) = linear_dims(x.shape(), weight.shape(), bias.map(Tensor::shape))?;
    ensure_finite(weight, "linear weight")?;
    let batch = x.shape().batch();
    let mut out = Vec::with_capacity(batch * out_f);
    for xs in x.data().chunks(in_f) {
        for (o, wrow) in weight.data().chunks(in_f).enumerate() {
            let mut acc: f64 = wrow.iter().zip(xs).map(|(w, v)| w * v).sum();
            if let Some(b) = bias {
                acc += b.data()[o];
            }
            out.push(acc);
        }
    }
    Ok(Tensor::from_raw(Shape::new(batch, out_f, 1, 1), out))
}

pub struct LinearGrads {
    pub input: Tensor,
    pub weight: Tensor,
    pub bias: Tensor,
}

pub fn linear_backward(x: &Tensor, weight: &Tensor, grad_out: &Tensor) -> Result<LinearGrads> {
    let (in_f, out_f) = linear_dims(x.shape(), weight.shape(), None)?;
    let mut dx = vec![0.0; x.numel()];
    let mut dw = vec![0.0; weight.numel()];
    let mut db = vec![0.0; out_f];
    for ((xs, gs), dxs) in x
        .data()
        .chunks(in_f)
        .zip(grad_out.data().chunks(out_f))
        .zip(dx.chunks_mut(in_f))
    {
        for (o, &g) in gs.iter().enumerate() {
            db[o] += g;
            let wrow = &weight.data()[o * in_f..(o + 1) * in_f];
            let dwrow = &mut dw[o * in_f..(o + 1) * in_f];
            for i in 0..in_f {
                dwrow[i] += g * xs[i];
                dxs[i] += g * wrow[i];
            }
        }
    }
    Ok(LinearGrads {
        input: Tensor::from_raw(x.shape(), dx),
        weight: Tensor::from_raw(weight.shape(), dw),
        bias: Tensor::from_raw(Shape::new(1, out_f, 1, 1), db),
    })
}

// ---------------------------------------------------------------------------
// resampling
// ---------------------------------------------------------------------------

pub fn nearest_upsample(x: &Tensor, factor: usize) -> Result<Tensor> {
    if factor < 1 {
        return Err(Error::Argument(format!("upsample factor must be >= 1, got {factor}")));
    }
    let s = x.shape();
    let (h, w) = (s.height(), s.width());
    let (oh, ow) = (h * factor, w * factor);
    let mut out = Vec::with_capacity(s.numel() * factor * factor);
    for plane in x.data().chunks(h * w) {
        for y in 0..oh {
            let src = &plane[(y / factor) * w..(y / factor + 1) * w];
            for xo in 0..ow {
                out.push(src[xo / factor]);
            }
        }
    }
    Ok(Tensor::from_raw(
        Shape::new(s.batch(), s.channels(), oh, ow),
        out,
    ))
}

pub fn nearest_upsample_backward(input_shape: Shape, factor: usize, grad_out: &Tensor) -> Tensor {
    let (h, w) = (input_shape.height(), input_shape.width());
    let ow = w * factor;
    let mut out = vec![0.0; input_shape.numel()];
    for (dst, src) in out
        .chunks_mut(h * w)
        .zip(grad_out.data().chunks(h * w * factor * factor))
    {
        for (y, row) in src.chunks(ow).enumerate() {
            let drow = &mut dst[(y / factor) * w..(y / factor + 1) * w];
            for (xo, g) in row.iter().enumerate() {
                drow[xo / factor] += g;
            }
        }
    }
    Tensor::from_raw(input_shape, out)
}

/// Source taps and weight for half-pixel-centred linear interpolation.
fn linear_taps(out_idx: usize, factor: usize, in_len: usize) -> (usize, usize, f64) {
    let src = ((out_idx as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
    let i0 = (src.floor() as usize).min(in_len - 1);
    let i1 = (i0 + 1).min(in_len - 1);
    (i0, i1, src - i0 as f64)
}

/// Bilinear upsampling with half-pixel centres and edge clamping.
pub fn bilinear_upsample(x: &Tensor, factor: usize) -> Result<Tensor> {
    if factor < 1 {
        return Err(Error::Argument(format!("upsample factor must be >= 1, got {factor}")));
    }
    let s = x.shape();
    let (h, w) = (s.height(), s.width());
    if h == 0 || w == 0 {
        return Err(Error::dim("bilinear_upsample", format!("empty input {s}")));
    }
    let (oh, ow) = (h * factor, w * factor);
    let xs: Vec<_> = (0..ow).map(|i| linear_taps(i, factor, w)).collect();
    let ys: Vec<_> = (0..oh).map(|i| linear_taps(i, factor, h)).collect();
    let mut out = Vec::with_capacity(s.batch() * s.channels() * oh * ow);
    for plane in x.data().chunks(h * w) {
        for &(y0, y1, ly) in &ys {
            for &(x0, x1, lx) in &xs {
                let top = plane[y0 * w + x0] * (1.0 - lx) + plane[y0 * w + x1] * lx;
                let bot = plane[y1 * w + x0] * (1.0 - lx) + plane[y1 * w + x1] * lx;
                out.push(top * (1.0 - ly) + bot * ly);
            }
        }
    }
    Ok(Tensor::from_raw(
        Shape::new(s.batch(), s.channels(), oh, ow),
        out,
    ))
}

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Mul,
}

/// Number of consecutive elements of `a` that share one element of `b`.
///
/// Broadcasting is limited to the layouts the network needs: identical
/// shapes, per-channel scalars `(B, C, 1, 1)` over spatial dims, per-sample
/// scalars `(B, 1, 1, 1)`, and a single global scalar `(1, 1, 1, 1)`.
pub fn broadcast_group(a: Shape, b: Shape) -> Result<usize> {
    let [ab, ac, ah, aw] = a.0;
    if a == b {
        return Ok(1);
    }
    if b == Shape::new(ab, ac, 1, 1) {
        return Ok(ah * aw);
    }
    if b == Shape::new(ab, 1, 1, 1) {
        return Ok(ac * ah * aw);
    }
    if b == Shape::scalar() {
        return Ok(a.numel());
    }
    Err(Error::dim(
        "elementwise",
        format!("cannot broadcast {b} onto {a}"),
    ))
}

/// `a (+|*) b`, where `b` may be one of the permitted broadcast shapes.
pub fn elementwise(a: &Tensor, b: &Tensor, kind: Elementwise) -> Result<Tensor> {
    let group = broadcast_group(a.shape(), b.shape())?;
    let mut out = Vec::with_capacity(a.numel());
    for (chunk, &bv) in a.data().chunks(group).zip(b.data()) {
        match kind {
            Elementwise::Add => out.extend(chunk.iter().map(|v| v + bv)),
            Elementwise::Mul => out.extend(chunk.iter().map(|v| v * bv)),
        }
    }
    Ok(Tensor::from_raw(a.shape(), out))
}

/// Gradients of [`elementwise`]; the gradient for `b` is reduced back onto
/// its broadcast shape.
pub fn elementwise_backward(
    a: &Tensor,
    b: &Tensor,
    kind: Elementwise,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let group = broadcast_group(a.shape(), b.shape())?;
    let mut da = Vec::with_capacity(a.numel());
    let mut db = Vec::with_capacity(b.numel());
    for ((ga, av), &bv) in grad_out
        .data()
        .chunks(group)
        .zip(a.data().chunks(group))
        .zip(b.data())
    {
        match kind {
            Elementwise::Add => {
                da.extend_from_slice(ga);
                db.push(ga.iter().sum());
            }
            Elementwise::Mul => {
                da.extend(ga.iter().map(|g| g * bv));
                db.push(ga.iter().zip(av).map(|(g, v)| g * v).sum());
            }
        }
    }
    Ok((
        Tensor::from_raw(a.shape(), da),
        Tensor::from_raw(b.shape(), db),
    ))
}

/// `alpha * a + beta * b` over identically shaped tensors.
pub fn scale_add(a: &Tensor, alpha: f64, b: &Tensor, beta: f64) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::dim(
            "scale_add",
            format!("shapes {} and {} differ", a.shape(), b.shape()),
        ));
    }
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| alpha * x + beta * y)
        .collect();
    Ok(Tensor::from_raw(a.shape(), data))
}

pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.batch() != sb.batch() || sa.height() != sb.height() || sa.width() != sb.width() {
        return Err(Error::dim("concat", format!("cannot concatenate {sa} and {sb}")));
    }
    let (na, nb) = (sa.channels() * sa.plane(), sb.channels() * sb.plane());
    let mut out = Vec::with_capacity(a.numel() + b.numel());
    for (ca, cb) in a.data().chunks(na).zip(b.data().chunks(nb)) {
        out.extend_from_slice(ca);
        out.extend_from_slice(cb);
    }
    Ok(Tensor::from_raw(
        Shape::new(sa.batch(), sa.channels() + sb.channels(), sa.height(), sa.width()),
        out,
    ))
}

pub fn concat_channels_backward(a: Shape, b: Shape, grad_out: &Tensor) -> (Tensor, Tensor) {
    let (na, nb) = (a.channels() * a.plane(), b.channels() * b.plane());
    let mut da = Vec::with_capacity(a.numel());
    let mut db = Vec::with_capacity(b.numel());
    for chunk in grad_out.data().chunks(na + nb) {
        da.extend_from_slice(&chunk[..na]);
        db.extend_from_slice(&chunk[na..]);
    }
    (Tensor::from_raw(a, da), Tensor::from_raw(b, db))
}

/// Extracts channel `c` as a `(B, 1, H, W)` tensor.
pub fn select_channel(x: &Tensor, c: usize) -> Result<Tensor> {
    let s = x.shape();
    if c >= s.channels() {
        return Err(Error::dim("select_channel", format!("channel {c} out of range for {s}")));
    }
    let mut out = Vec::with_capacity(s.batch() * s.plane());
    for b in 0..s.batch() {
        out.extend_from_slice(x.plane(b, c));
    }
    Ok(Tensor::from_raw(
        Shape::new(s.batch(), 1, s.height(), s.width()),
        out,
    ))
}

pub fn select_channel_backward(input_shape: Shape, c: usize, grad_out: &Tensor) -> Tensor {
    let n = input_shape.plane();
    let mut out = vec![0.0; input_shape.numel()];
    for b in 0..input_shape.batch() {
        let start = (b * input_shape.channels() + c) * n;
        out[start..start + n].copy_from_slice(&grad_out.data()[b * n..(b + 1) * n]);
    }
    Tensor::from_raw(input_shape, out)
}

// ---------------------------------------------------------------------------
// reductions and losses
// ---------------------------------------------------------------------------

/// Mean absolute error.
pub fn l1_loss(pred: &Tensor, target: &Tensor) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::dim(
            "l1_loss",
            format!("prediction {} vs target {}", pred.shape(), target.shape()),
        ));
    }
    let total: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| (p - t).abs())
        .sum();
    Ok(total / pred.numel() as f64)
}

/// Subgradient of [`l1_loss`] with respect to the prediction, 0 at ties.
pub fn l1_loss_backward(pred: &Tensor, target: &Tensor, grad_out: f64) -> Tensor {
    let scale = grad_out / pred.numel() as f64;
    let data = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| {
            let d = p - t;
            if d > 0.0 {
                scale
            } else if d < 0.0 {
                -scale
            } else {
                0.0
            }
        })
        .collect();
    Tensor::from_raw(pred.shape(), data)
}

/// Mean squared error.
pub fn l2_loss(pred: &Tensor, target: &Tensor) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::dim(
            "l2_loss",
            format!("prediction {} vs target {}", pred.shape(), target.shape()),
        ));
    }
    let total: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| (p - t) * (p - t))
        .sum();
    Ok(total / pred.numel() as f64)
}

pub fn l2_loss_backward(pred: &Tensor, target: &Tensor, grad_out: f64) -> Tensor {
    let scale = 2.0 * grad_out / pred.numel() as f64;
    let data = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| scale * (p - t))
        .collect();
    Tensor::from_raw(pred.shape(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: Shape, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    /// Triple-loop cross-correlation with explicit zero padding.
    fn conv_oracle(x: &Tensor, w: &Tensor, b: &[f64], pad: usize) -> Tensor {
        let [n, _, h, wd] = x.shape().0;
        let [oc, ic, kh, kw] = w.shape().0;
        let oh = h + 2 * pad - kh + 1;
        let ow = wd + 2 * pad - kw + 1;
        Tensor::from_fn(Shape::new(n, oc, oh, ow), |[bi, o, y, xo]| {
            let mut acc = b[o];
            for i in 0..ic {
                for ky in 0..kh {
                    for kx in 0..kw {
                        let sy = y as isize + ky as isize - pad as isize;
                        let sx = xo as isize + kx as isize - pad as isize;
                        if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < wd {
                            acc += w.at([o, i, ky, kx]) * x.at([bi, i, sy as usize, sx as usize]);
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn conv_identity_kernel_is_exact_identity() {
        let x = random(Shape::new(2, 3, 5, 4), 1);
        let w = Tensor::from_fn(Shape::new(3, 3, 1, 1), |[o, i, _, _]| (o == i) as u8 as f64);
        let y = conv2d(&x, &w, None, 1, 0).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv_single_channel_identity() {
        let x = random(Shape::new(1, 1, 4, 4), 2);
        let w = Tensor::full(Shape::new(1, 1, 1, 1), 1.0);
        let b = Tensor::zeros(Shape::new(1, 1, 1, 1));
        assert_eq!(conv2d(&x, &w, Some(&b), 1, 0).unwrap(), x);
    }

    #[test]
    fn conv_zero_kernel_gives_bias() {
        let x = random(Shape::new(1, 2, 4, 4), 3);
        let w = Tensor::zeros(Shape::new(3, 2, 3, 3));
        let b = Tensor::new(Shape::new(1, 3, 1, 1), vec![0.5, -1.0, 2.0]).unwrap();
        let y = conv2d(&x, &w, Some(&b), 1, 1).unwrap();
        for o in 0..3 {
            assert!(y.plane(0, o).iter().all(|&v| v == b.data()[o]));
        }
    }

    #[test]
    fn conv_matches_direct_summation() {
        let x = random(Shape::new(1, 1, 4, 4), 4);
        let w = random(Shape::new(1, 1, 3, 3), 5);
        let b = Tensor::new(Shape::new(1, 1, 1, 1), vec![0.25]).unwrap();
        let y = conv2d(&x, &w, Some(&b), 1, 1).unwrap();
        let oracle = conv_oracle(&x, &w, &[0.25], 1);
        assert_eq!(y.shape(), Shape::new(1, 1, 4, 4));
        assert!(y.max_abs_diff(&oracle) < 1e-12);

        let x = random(Shape::new(3, 4, 6, 5), 6);
        let w = random(Shape::new(5, 4, 3, 3), 7);
        let bias: Vec<f64> = (0..5).map(|i| i as f64 * 0.1).collect();
        let bt = Tensor::new(Shape::new(1, 5, 1, 1), bias.clone()).unwrap();
        for pad in [0, 1] {
            let y = conv2d(&x, &w, Some(&bt), 1, pad).unwrap();
            assert!(y.max_abs_diff(&conv_oracle(&x, &w, &bias, pad)) < 1e-12);
        }
    }

    #[test]
    fn conv_rejects_bad_shapes() {
        let x = random(Shape::new(1, 2, 4, 4), 8);
        let w = Tensor::zeros(Shape::new(1, 3, 3, 3));
        assert!(matches!(conv2d(&x, &w, None, 1, 1), Err(Error::Dimension { .. })));
        let w = Tensor::zeros(Shape::new(1, 2, 5, 5));
        assert!(conv2d(&x, &w, None, 1, 2).is_err());
        let w = Tensor::zeros(Shape::new(1, 2, 3, 3));
        assert!(conv2d(&x, &w, None, 2, 1).is_err());
        assert!(conv2d(&x, &w, None, 1, 2).is_err());
    }

    #[test]
    fn conv_rejects_non_finite_weights() {
        let x = random(Shape::new(1, 1, 3, 3), 9);
        let mut w = Tensor::zeros(Shape::new(1, 1, 1, 1));
        w.data_mut()[0] = f64::NAN;
        assert!(matches!(conv2d(&x, &w, None, 1, 0), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn relu_cases() {
        let x = Tensor::new(Shape::new(1, 1, 1, 3), vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
        let neg = Tensor::full(Shape::new(1, 2, 2, 2), -0.3);
        assert!(relu(&neg).data().iter().all(|&v| v == 0.0));
        let pos = random(Shape::new(1, 2, 2, 2), 10).map(|v| v.abs() + 0.1);
        assert_eq!(relu(&pos), pos);
        let g = Tensor::full(x.shape(), 1.0);
        assert_eq!(relu_backward(&x, &g).data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn sigmoid_cases() {
        assert_eq!(sigmoid_scalar(0.0), 0.5);
        let s = sigmoid_scalar(40.0);
        assert!(s > 1.0 - 1e-15 && s < 1.0);
        // 1 / (1 + e^-1), evaluated to 20 digits
        assert!((sigmoid_scalar(1.0) - 0.731_058_578_630_004_9).abs() < 1e-12);
        for x in [-800.0, -500.0, -40.0, 500.0, 800.0] {
            let s = sigmoid_scalar(x);
            assert!(s > 0.0 && s < 1.0 && s.is_finite(), "sigmoid({x}) = {s}");
        }
    }

    #[test]
    fn softmax_cases() {
        assert_eq!(softmax(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
        let p = softmax(&[2f64.ln(), 0.0]).unwrap();
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-12 && (p[1] - 1.0 / 3.0).abs() < 1e-12);
        assert!(softmax(&[]).is_err());
        let a = softmax(&[0.3, -1.2, 0.8]).unwrap();
        let b = softmax(&[100.3, 98.8, 100.8]).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn global_avg_pool_cases() {
        let c = Tensor::full(Shape::new(2, 3, 4, 5), 1.75);
        assert!(global_avg_pool(&c).unwrap().data().iter().all(|&v| v == 1.75));
        let one = random(Shape::new(2, 3, 1, 1), 11);
        assert_eq!(global_avg_pool(&one).unwrap(), one);
        let x = random(Shape::new(1, 2, 3, 3), 12);
        let pooled = global_avg_pool(&x).unwrap();
        for c in 0..2 {
            let mut s = 0.0;
            for y in 0..3 {
                for xx in 0..3 {
                    s += x.at([0, c, y, xx]);
                }
            }
            assert!((pooled.at([0, c, 0, 0]) - s / 9.0).abs() < 1e-14);
        }
        assert!(global_avg_pool(&Tensor::zeros(Shape::new(1, 1, 0, 3))).is_err());
    }

    #[test]
    fn linear_cases() {
        let x = random(Shape::new(2, 4, 1, 1), 13);
        let eye = Tensor::from_fn(Shape::new(4, 4, 1, 1), |[o, i, _, _]| (o == i) as u8 as f64);
        assert_eq!(linear(&x, &eye, None).unwrap(), x);
        let b = Tensor::new(Shape::new(1, 3, 1, 1), vec![1.0, 2.0, 3.0]).unwrap();
        let zero = Tensor::zeros(Shape::new(3, 4, 1, 1));
        let y = linear(&x, &zero, Some(&b)).unwrap();
        assert_eq!(&y.data()[..3], b.data());
        let w = random(Shape::new(3, 4, 1, 1), 14);
        let y = linear(&x, &w, Some(&b)).unwrap();
        for bi in 0..2 {
            for o in 0..3 {
                let mut acc = b.data()[o];
                for i in 0..4 {
                    acc += w.at([o, i, 0, 0]) * x.at([bi, i, 0, 0]);
                }
                assert!((y.at([bi, o, 0, 0]) - acc).abs() < 1e-12);
            }
        }
        assert!(linear(&x, &Tensor::zeros(Shape::new(3, 5, 1, 1)), None).is_err());
    }

    #[test]
    fn nearest_upsample_cases() {
        let x = random(Shape::new(1, 2, 3, 3), 15);
        assert_eq!(nearest_upsample(&x, 1).unwrap(), x);
        let px = Tensor::full(Shape::new(1, 1, 1, 1), 0.7);
        let up = nearest_upsample(&px, 3).unwrap();
        assert_eq!(up.shape(), Shape::new(1, 1, 3, 3));
        assert!(up.data().iter().all(|&v| v == 0.7));
        let cb = Tensor::new(Shape::new(1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let up = nearest_upsample(&cb, 2).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(up.at([0, 0, i, j]), cb.at([0, 0, i / 2, j / 2]));
            }
        }
        assert!(matches!(nearest_upsample(&x, 0), Err(Error::Argument(_))));
    }

    #[test]
    fn bilinear_constant_and_identity() {
        let c = Tensor::full(Shape::new(1, 3, 4, 5), 0.3);
        let up = bilinear_upsample(&c, 3).unwrap();
        assert!(up.data().iter().all(|&v| (v - 0.3).abs() < 1e-15));
        let x = random(Shape::new(1, 1, 3, 3), 16);
        assert_eq!(bilinear_upsample(&x, 1).unwrap(), x);
    }

    #[test]
    fn elementwise_cases() {
        let a = random(Shape::new(2, 3, 4, 4), 17);
        let ones = Tensor::full(a.shape(), 1.0);
        assert_eq!(elementwise(&a, &ones, Elementwise::Mul).unwrap(), a);
        let b = random(a.shape(), 18);
        assert_eq!(scale_add(&a, 1.0, &b, 0.0).unwrap(), a);
        let mixed = scale_add(&a, 0.3, &b, 0.7).unwrap();
        for i in 0..a.numel() {
            assert!((mixed.data()[i] - (0.3 * a.data()[i] + 0.7 * b.data()[i])).abs() < 1e-14);
        }
        let per_channel = random(Shape::new(2, 3, 1, 1), 19);
        let y = elementwise(&a, &per_channel, Elementwise::Mul).unwrap();
        assert_eq!(y.at([1, 2, 3, 1]), a.at([1, 2, 3, 1]) * per_channel.at([1, 2, 0, 0]));
        let per_sample = random(Shape::new(2, 1, 1, 1), 20);
        let y = elementwise(&a, &per_sample, Elementwise::Add).unwrap();
        assert_eq!(y.at([1, 2, 3, 1]), a.at([1, 2, 3, 1]) + per_sample.at([1, 0, 0, 0]));
        let bad = Tensor::zeros(Shape::new(2, 3, 4, 1));
        assert!(matches!(
            elementwise(&a, &bad, Elementwise::Add),
            Err(Error::Dimension { .. })
        ));
        assert!(scale_add(&a, 1.0, &per_sample, 1.0).is_err());
    }

    #[test]
    fn concat_and_select_roundtrip() {
        let a = random(Shape::new(2, 2, 3, 3), 21);
        let b = random(Shape::new(2, 3, 3, 3), 22);
        let c = concat_channels(&a, &b).unwrap();
        assert_eq!(c.shape(), Shape::new(2, 5, 3, 3));
        assert_eq!(select_channel(&c, 3).unwrap(), select_channel(&b, 1).unwrap());
        let (da, db) = concat_channels_backward(a.shape(), b.shape(), &c);
        assert_eq!((da, db), (a, b));
    }

    #[test]
    fn l1_cases() {
        let t = random(Shape::new(1, 3, 4, 4), 23);
        assert_eq!(l1_loss(&t, &t).unwrap(), 0.0);
        let p = t.map(|v| v + 0.5);
        assert!((l1_loss(&p, &t).unwrap() - 0.5).abs() < 1e-15);
        let q = random(t.shape(), 24);
        let mut acc = 0.0;
        for i in 0..t.numel() {
            acc += (q.data()[i] - t.data()[i]).abs();
        }
        assert!((l1_loss(&q, &t).unwrap() - acc / t.numel() as f64).abs() < 1e-14);
        assert!(l1_loss(&q, &Tensor::zeros(Shape::new(1, 3, 4, 3))).is_err());
    }
}
