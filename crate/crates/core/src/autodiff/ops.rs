//! Forward and backward kernels for every recorded operation.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Lower clamp applied to the input of [`Op::Log`].
pub const LOG_FLOOR: f64 = 1e-12;

/// Operation kinds without their attributes, for naming and error reporting.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Scale,
    Offset,
    MatMul,
    Conv2d,
    MaxPool2,
    Upsample2,
    Relu,
    Sigmoid,
    Softplus,
    ChannelSoftmax,
    Log,
    GlobalAvgPool,
    ChannelConcat,
    SpatialCrop,
    Sum,
    Reshape,
    #[cfg(test)]
    Corrupt,
}

const KIND_NAMES: &[(OpKind, &str)] = &[
    (OpKind::Leaf, "leaf"),
    (OpKind::Add, "add"),
    (OpKind::Sub, "sub"),
    (OpKind::Mul, "elementwise_mul"),
    (OpKind::Div, "div"),
    (OpKind::Scale, "scale"),
    (OpKind::Offset, "offset"),
    (OpKind::MatMul, "matmul"),
    (OpKind::Conv2d, "conv2d"),
    (OpKind::MaxPool2, "maxpool"),
    (OpKind::Upsample2, "nearest_upsample"),
    (OpKind::Relu, "relu"),
    (OpKind::Sigmoid, "sigmoid"),
    (OpKind::Softplus, "softplus"),
    (OpKind::ChannelSoftmax, "channel_softmax"),
    (OpKind::Log, "natural_log"),
    (OpKind::GlobalAvgPool, "global_avg_pool"),
    (OpKind::ChannelConcat, "channel_concat"),
    (OpKind::SpatialCrop, "spatial_crop"),
    (OpKind::Sum, "sum"),
    (OpKind::Reshape, "reshape"),
];

impl OpKind {
    pub fn name(self) -> &'static str {
        KIND_NAMES
            .iter()
            .find(|(k, _)| *k == self)
            .map(|(_, n)| *n)
            .unwrap_or("corrupt")
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        KIND_NAMES
            .iter()
            .find(|(_, n)| *n == s)
            .map(|(k, _)| *k)
            .ok_or_else(|| Error::UnknownOp(s.to_string()))
    }
}

/// An operation together with its attributes.
#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    /// Multiply by a constant.
    Scale(f64),
    /// Add a constant.
    Offset(f64),
    /// `[M, K] × [K, N]`.
    MatMul,
    /// Inputs `x [C,H,W]`, `w [O,C,kh,kw]`, `b [O]`; stride 1, zero "same" padding, odd kernels.
    Conv2d,
    /// 2×2 window, stride 2.
    MaxPool2,
    /// Nearest-neighbour ×2.
    Upsample2,
    Relu,
    Sigmoid,
    Softplus,
    /// Softmax over axis 0 of `[K,H,W]` (or a `[K]` vector).
    ChannelSoftmax,
    /// `ln(max(x, LOG_FLOOR))`.
    Log,
    /// `[C,H,W] -> [C]`.
    GlobalAvgPool,
    ChannelConcat,
    SpatialCrop {
        y0: usize,
        x0: usize,
        height: usize,
        width: usize,
    },
    /// Sum of all elements to a `[1]` tensor.
    Sum,
    Reshape(Vec<usize>),
    /// Identity forward with a doubled gradient; exists to prove that the
    /// gradient checker catches wrong backward rules.
    #[cfg(test)]
    Corrupt,
}

impl Op {
    pub fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Add => OpKind::Add,
            Op::Sub => OpKind::Sub,
            Op::Mul => OpKind::Mul,
            Op::Div => OpKind::Div,
            Op::Scale(_) => OpKind::Scale,
            Op::Offset(_) => OpKind::Offset,
            Op::MatMul => OpKind::MatMul,
            Op::Conv2d => OpKind::Conv2d,
            Op::MaxPool2 => OpKind::MaxPool2,
            Op::Upsample2 => OpKind::Upsample2,
            Op::Relu => OpKind::Relu,
            Op::Sigmoid => OpKind::Sigmoid,
            Op::Softplus => OpKind::Softplus,
            Op::ChannelSoftmax => OpKind::ChannelSoftmax,
            Op::Log => OpKind::Log,
            Op::GlobalAvgPool => OpKind::GlobalAvgPool,
            Op::ChannelConcat => OpKind::ChannelConcat,
            Op::SpatialCrop { .. } => OpKind::SpatialCrop,
            Op::Sum => OpKind::Sum,
            Op::Reshape(_) => OpKind::Reshape,
            #[cfg(test)]
            Op::Corrupt => OpKind::Corrupt,
        }
    }
}

/// Forward values kept for the backward pass beyond inputs and output.
#[derive(Clone, Debug, Default)]
pub(crate) enum Saved<T> {
    #[default]
    Nothing,
    /// im2col matrix `[C·kh·kw, H·W]` of a convolution input.
    Columns(Vec<T>),
    /// Flat input index of each pooled maximum.
    Argmax(Vec<u32>),
}

fn arity(op: &Op, n: usize) -> Result<()> {
    let want = match op {
        Op::Leaf => 0,
        Op::ChannelConcat => {
            return if n >= 1 {
                Ok(())
            } else {
                Err(Error::shape(OpKind::ChannelConcat, "needs at least one input"))
            }
        }
        Op::Add | Op::Sub | Op::Mul | Op::Div | Op::MatMul => 2,
        Op::Conv2d => 3,
        _ => 1,
    };
    if n == want {
        Ok(())
    } else {
        Err(Error::shape(op.kind(), format!("expects {want} inputs, got {n}")))
    }
}

fn same_shape<T: Scalar>(kind: OpKind, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(Error::shape(
            kind,
            format!("{:?} vs {:?} (no broadcasting)", a.shape(), b.shape()),
        ))
    }
}

fn chw<T: Scalar>(kind: OpKind, t: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(Error::shape(kind, format!("expects [C,H,W], got {:?}", t.shape()))),
    }
}

fn zip_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape(), data)
}

#[inline]
fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

/// Unfold `x [C,H,W]` into `[C·kh·kw, H·W]` with zero "same" padding.
fn im2col<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, kh: usize, kw: usize) -> Vec<T> {
    let (ph, pw) = (kh / 2, kw / 2);
    let hw = h * w;
    let mut col = vec![T::zero(); c * kh * kw * hw];
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for i in 0..kh {
            for j in 0..kw {
                let row = &mut col[((ci * kh + i) * kw + j) * hw..][..hw];
                let x_lo = pw.saturating_sub(j);
                let x_hi = (w + pw).saturating_sub(j).min(w);
                if x_lo >= x_hi {
                    continue;
                }
                for y in 0..h {
                    let sy = y + i;
                    if sy < ph || sy - ph >= h {
                        continue;
                    }
                    let sy = sy - ph;
                    let src = &plane[sy * w + x_lo + j - pw..sy * w + x_hi + j - pw];
                    row[y * w + x_lo..y * w + x_hi].copy_from_slice(src);
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: accumulate columns back onto the image grid.
fn col2im<T: Scalar>(col: &[T], c: usize, h: usize, w: usize, kh: usize, kw: usize) -> Vec<T> {
    let (ph, pw) = (kh / 2, kw / 2);
    let hw = h * w;
    let mut x = vec![T::zero(); c * hw];
    for ci in 0..c {
        let plane = &mut x[ci * hw..(ci + 1) * hw];
        for i in 0..kh {
            for j in 0..kw {
                let row = &col[((ci * kh + i) * kw + j) * hw..][..hw];
                let x_lo = pw.saturating_sub(j);
                let x_hi = (w + pw).saturating_sub(j).min(w);
                if x_lo >= x_hi {
                    continue;
                }
                for y in 0..h {
                    let sy = y + i;
                    if sy < ph || sy - ph >= h {
                        continue;
                    }
                    let sy = sy - ph;
                    let dst = &mut plane[sy * w + x_lo + j - pw..sy * w + x_hi + j - pw];
                    for (d, &s) in dst.iter_mut().zip(&row[y * w + x_lo..y * w + x_hi]) {
                        *d = *d + s;
                    }
                }
            }
        }
    }
    x
}

/// Evaluate `op` on `inputs`. `keep` asks for the values the backward pass needs.
pub(crate) fn forward<T: Scalar>(
    op: &Op,
    inputs: &[&Tensor<T>],
    keep: bool,
) -> Result<(Tensor<T>, Saved<T>)> {
    arity(op, inputs.len())?;
    let kind = op.kind();
    let out = match op {
        Op::Leaf => unreachable!("leaves are inserted directly"),
        Op::Add | Op::Sub | Op::Mul | Op::Div => {
            let (a, b) = (inputs[0], inputs[1]);
            same_shape(kind, a, b)?;
            match op {
                Op::Add => zip_map(a, b, |x, y| x + y),
                Op::Sub => zip_map(a, b, |x, y| x - y),
                Op::Mul => zip_map(a, b, |x, y| x * y),
                _ => zip_map(a, b, |x, y| x / y),
            }
        }
        Op::Scale(s) => {
            let s = T::lit(*s);
            inputs[0].map(|v| v * s)
        }
        Op::Offset(c) => {
            let c = T::lit(*c);
            inputs[0].map(|v| v + c)
        }
        Op::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            let (m, k, n) = match (a.shape(), b.shape()) {
                (&[m, k], &[k2, n]) if k == k2 => (m, k, n),
                (sa, sb) => return Err(Error::shape(kind, format!("{sa:?} × {sb:?}"))),
            };
            let mut out = vec![T::zero(); m * n];
            T::gemm(m, k, n, a.data(), false, b.data(), false, &mut out, false);
            Tensor::new([m, n], out)
        }
        Op::Conv2d => {
            let (x, wt, b) = (inputs[0], inputs[1], inputs[2]);
            let (c, h, w) = chw(kind, x)?;
            let (o, kh, kw) = match *wt.shape() {
                [o, ci, kh, kw] if ci == c && kh % 2 == 1 && kw % 2 == 1 => (o, kh, kw),
                _ => {
                    return Err(Error::shape(
                        kind,
                        format!(
                            "kernel {:?} incompatible with input {:?} (need [O,{c},odd,odd])",
                            wt.shape(),
                            x.shape()
                        ),
                    ))
                }
            };
            if b.shape() != [o] {
                return Err(Error::shape(kind, format!("bias {:?}, expected [{o}]", b.shape())));
            }
            let hw = h * w;
            let ck = c * kh * kw;
            let pointwise = kh == 1 && kw == 1;
            let cols = if pointwise { None } else { Some(im2col(x.data(), c, h, w, kh, kw)) };
            let col: &[T] = cols.as_deref().unwrap_or(x.data());
            let mut out = vec![T::zero(); o * hw];
            for (oi, row) in out.chunks_mut(hw).enumerate() {
                row.fill(b.data()[oi]);
            }
            T::gemm(o, ck, hw, wt.data(), false, col, false, &mut out, true);
            let saved = match cols {
                Some(cols) if keep => Saved::Columns(cols),
                _ => Saved::Nothing,
            };
            return Ok((Tensor::new([o, h, w], out), saved));
        }
        Op::MaxPool2 => {
            let x = inputs[0];
            let (c, h, w) = chw(kind, x)?;
            if h % 2 != 0 || w % 2 != 0 {
                return Err(Error::shape(kind, format!("spatial dims {h}x{w} must be even")));
            }
            let (oh, ow) = (h / 2, w / 2);
            let mut out = Vec::with_capacity(c * oh * ow);
            let mut arg = Vec::with_capacity(if keep { c * oh * ow } else { 0 });
            let xd = x.data();
            for ci in 0..c {
                for y in 0..oh {
                    for xx in 0..ow {
                        let base = ci * h * w + 2 * y * w + 2 * xx;
                        let mut best = base;
                        for idx in [base + 1, base + w, base + w + 1] {
                            if xd[idx] > xd[best] {
                                best = idx;
                            }
                        }
                        out.push(xd[best]);
                        if keep {
                            arg.push(best as u32);
                        }
                    }
                }
            }
            let saved = if keep { Saved::Argmax(arg) } else { Saved::Nothing };
            return Ok((Tensor::new([c, oh, ow], out), saved));
        }
        Op::Upsample2 => {
            let x = inputs[0];
            let (c, h, w) = chw(kind, x)?;
            let (oh, ow) = (2 * h, 2 * w);
            let mut out = vec![T::zero(); c * oh * ow];
            let xd = x.data();
            for ci in 0..c {
                for y in 0..oh {
                    let src = &xd[ci * h * w + (y / 2) * w..][..w];
                    let dst = &mut out[ci * oh * ow + y * ow..][..ow];
                    for (xx, d) in dst.iter_mut().enumerate() {
                        *d = src[xx / 2];
                    }
                }
            }
            Tensor::new([c, oh, ow], out)
        }
        Op::Relu => inputs[0].map(|v| if v > T::zero() { v } else { T::zero() }),
        Op::Sigmoid => inputs[0].map(sigmoid),
        Op::Softplus => inputs[0].map(softplus),
        Op::ChannelSoftmax => {
            let x = inputs[0];
            let (k, h, w) = x
                .chw()
                .ok_or_else(|| Error::shape(kind, format!("expects [K,H,W] or [K], got {:?}", x.shape())))?;
            let hw = h * w;
            let xd = x.data();
            let mut out = vec![T::zero(); xd.len()];
            for p in 0..hw {
                let mut m = xd[p];
                for ki in 1..k {
                    m = m.max(xd[ki * hw + p]);
                }
                let mut s = T::zero();
                for ki in 0..k {
                    let e = (xd[ki * hw + p] - m).exp();
                    out[ki * hw + p] = e;
                    s = s + e;
                }
                // Probabilities under ε² are invisible at this precision (and
                // under LOG_FLOOR), but left alone they seed subnormals through
                // the backward pass, which run many times slower on most CPUs.
                let tiny = T::epsilon() * T::epsilon();
                for ki in 0..k {
                    let v = out[ki * hw + p] / s;
                    out[ki * hw + p] = if v < tiny { T::zero() } else { v };
                }
            }
            Tensor::new(x.shape(), out)
        }
        Op::Log => {
            let floor = T::lit(LOG_FLOOR);
            inputs[0].map(|v| v.max(floor).ln())
        }
        Op::GlobalAvgPool => {
            let x = inputs[0];
            let (c, h, w) = chw(kind, x)?;
            let hw = h * w;
            let out = x
                .data()
                .chunks(hw)
                .map(|plane| T::lit(plane.iter().map(|v| v.as_f64()).sum::<f64>() / hw as f64))
                .collect();
            Tensor::new([c], out)
        }
        Op::ChannelConcat => {
            let (_, h, w) = chw(kind, inputs[0])?;
            let mut total = 0;
            for t in inputs {
                let (ci, hi, wi) = chw(kind, t)?;
                if (hi, wi) != (h, w) {
                    return Err(Error::shape(
                        kind,
                        format!("spatial {hi}x{wi} differs from {h}x{w}"),
                    ));
                }
                total += ci;
            }
            let mut out = Vec::with_capacity(total * h * w);
            for t in inputs {
                out.extend_from_slice(t.data());
            }
            Tensor::new([total, h, w], out)
        }
        Op::SpatialCrop { y0, x0, height, width } => {
            let x = inputs[0];
            let (c, h, w) = chw(kind, x)?;
            if *height == 0 || *width == 0 || y0 + height > h || x0 + width > w {
                return Err(Error::shape(
                    kind,
                    format!("crop {height}x{width} at ({y0},{x0}) exceeds {h}x{w}"),
                ));
            }
            let mut out = Vec::with_capacity(c * height * width);
            for ci in 0..c {
                for y in *y0..y0 + height {
                    out.extend_from_slice(&x.data()[ci * h * w + y * w + x0..][..*width]);
                }
            }
            Tensor::new([c, *height, *width], out)
        }
        Op::Sum => Tensor::scalar(T::lit(inputs[0].sum_f64())),
        Op::Reshape(shape) => inputs[0]
            .clone()
            .reshaped(shape.clone())
            .map_err(|e| Error::shape(kind, e))?,
        #[cfg(test)]
        Op::Corrupt => inputs[0].clone(),
    };
    Ok((out, Saved::Nothing))
}

/// Gradients of the inputs given the output gradient. Entries are `None`
/// where `needs[i]` is false.
pub(crate) fn backward<T: Scalar>(
    op: &Op,
    inputs: &[&Tensor<T>],
    output: &Tensor<T>,
    saved: &Saved<T>,
    grad: &Tensor<T>,
    needs: &[bool],
) -> Vec<Option<Tensor<T>>> {
    let want = |i: usize| needs.get(i).copied().unwrap_or(false);
    let mut res: Vec<Option<Tensor<T>>> = vec![None; inputs.len()];
    match op {
        Op::Leaf => {}
        Op::Add => {
            for (i, r) in res.iter_mut().enumerate() {
                if want(i) {
                    *r = Some(grad.clone());
                }
            }
        }
        Op::Sub => {
            if want(0) {
                res[0] = Some(grad.clone());
            }
            if want(1) {
                res[1] = Some(grad.map(|g| -g));
            }
        }
        Op::Mul => {
            if want(0) {
                res[0] = Some(zip_map(grad, inputs[1], |g, b| g * b));
            }
            if want(1) {
                res[1] = Some(zip_map(grad, inputs[0], |g, a| g * a));
            }
        }
        Op::Div => {
            let (a, b) = (inputs[0], inputs[1]);
            if want(0) {
                res[0] = Some(zip_map(grad, b, |g, bv| g / bv));
            }
            if want(1) {
                let data = grad
                    .data()
                    .iter()
                    .zip(a.data().iter().zip(b.data()))
                    .map(|(&g, (&av, &bv))| -g * av / (bv * bv))
                    .collect();
                res[1] = Some(Tensor::new(b.shape(), data));
            }
        }
        Op::Scale(s) => {
            let s = T::lit(*s);
            res[0] = Some(grad.map(|g| g * s));
        }
        Op::Offset(_) | Op::Reshape(_) => {
            res[0] = Some(
                grad.clone()
                    .reshaped(inputs[0].shape())
                    .expect("gradient numel matches input"),
            );
        }
        Op::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let n = b.shape()[1];
            if want(0) {
                let mut da = vec![T::zero(); m * k];
                T::gemm(m, n, k, grad.data(), false, b.data(), true, &mut da, false);
                res[0] = Some(Tensor::new([m, k], da));
            }
            if want(1) {
                let mut db = vec![T::zero(); k * n];
                T::gemm(k, m, n, a.data(), true, grad.data(), false, &mut db, false);
                res[1] = Some(Tensor::new([k, n], db));
            }
        }
        Op::Conv2d => {
            let (x, wt) = (inputs[0], inputs[1]);
            let [c, h, w] = *x.shape() else { unreachable!() };
            let [o, _, kh, kw] = *wt.shape() else { unreachable!() };
            let hw = h * w;
            let ck = c * kh * kw;
            let g = grad.data();
            if want(1) {
                let recomputed;
                let col: &[T] = match saved {
                    Saved::Columns(cols) => cols,
                    _ if kh == 1 && kw == 1 => x.data(),
                    _ => {
                        recomputed = im2col(x.data(), c, h, w, kh, kw);
                        &recomputed
                    }
                };
                let mut dw = vec![T::zero(); o * ck];
                T::gemm(o, hw, ck, g, false, col, true, &mut dw, false);
                res[1] = Some(Tensor::new(wt.shape(), dw));
            }
            if want(2) {
                let db = g
                    .chunks(hw)
                    .map(|row| T::lit(row.iter().map(|v| v.as_f64()).sum::<f64>()))
                    .collect();
                res[2] = Some(Tensor::new([o], db));
            }
            if want(0) {
                let mut dcol = vec![T::zero(); ck * hw];
                T::gemm(ck, o, hw, wt.data(), true, g, false, &mut dcol, false);
                let dx = if kh == 1 && kw == 1 { dcol } else { col2im(&dcol, c, h, w, kh, kw) };
                res[0] = Some(Tensor::new(x.shape(), dx));
            }
        }
        Op::MaxPool2 => {
            let x = inputs[0];
            let mut dx = vec![T::zero(); x.numel()];
            let recomputed;
            let arg: &[u32] = match saved {
                Saved::Argmax(a) => a,
                _ => {
                    recomputed = argmax_pool(x);
                    &recomputed
                }
            };
            for (&idx, &g) in arg.iter().zip(grad.data()) {
                dx[idx as usize] = dx[idx as usize] + g;
            }
            res[0] = Some(Tensor::new(x.shape(), dx));
        }
        Op::Upsample2 => {
            let x = inputs[0];
            let [c, h, w] = *x.shape() else { unreachable!() };
            let ow = 2 * w;
            let g = grad.data();
            let mut dx = vec![T::zero(); c * h * w];
            for ci in 0..c {
                for y in 0..2 * h {
                    let src = &g[ci * 4 * h * w + y * ow..][..ow];
                    let dst = &mut dx[ci * h * w + (y / 2) * w..][..w];
                    for (xx, &v) in src.iter().enumerate() {
                        dst[xx / 2] = dst[xx / 2] + v;
                    }
                }
            }
            res[0] = Some(Tensor::new(x.shape(), dx));
        }
        Op::Relu => {
            res[0] = Some(zip_map(grad, inputs[0], |g, v| if v > T::zero() { g } else { T::zero() }));
        }
        Op::Sigmoid => {
            res[0] = Some(zip_map(grad, output, |g, y| g * y * (T::one() - y)));
        }
        Op::Softplus => {
            res[0] = Some(zip_map(grad, inputs[0], |g, v| g * sigmoid(v)));
        }
        Op::ChannelSoftmax => {
            let (k, h, w) = output.chw().expect("checked in forward");
            let hw = h * w;
            let (y, g) = (output.data(), grad.data());
            let mut dx = vec![T::zero(); y.len()];
            for p in 0..hw {
                let mut dot = T::zero();
                for ki in 0..k {
                    dot = dot + g[ki * hw + p] * y[ki * hw + p];
                }
                for ki in 0..k {
                    let i = ki * hw + p;
                    dx[i] = y[i] * (g[i] - dot);
                }
            }
            res[0] = Some(Tensor::new(output.shape(), dx));
        }
        Op::Log => {
            let floor = T::lit(LOG_FLOOR);
            res[0] = Some(zip_map(grad, inputs[0], |g, v| if v > floor { g / v } else { T::zero() }));
        }
        Op::GlobalAvgPool => {
            let x = inputs[0];
            let [_, h, w] = *x.shape() else { unreachable!() };
            let hw = h * w;
            let inv = T::lit(1.0 / hw as f64);
            let mut dx = Vec::with_capacity(x.numel());
            for &g in grad.data() {
                dx.extend(std::iter::repeat_n(g * inv, hw));
            }
            res[0] = Some(Tensor::new(x.shape(), dx));
        }
        Op::ChannelConcat => {
            let mut offset = 0;
            for (i, t) in inputs.iter().enumerate() {
                let n = t.numel();
                if want(i) {
                    res[i] = Some(Tensor::new(t.shape(), grad.data()[offset..offset + n].to_vec()));
                }
                offset += n;
            }
        }
        Op::SpatialCrop { y0, x0, height, width } => {
            let x = inputs[0];
            let [c, h, w] = *x.shape() else { unreachable!() };
            let mut dx = vec![T::zero(); x.numel()];
            let g = grad.data();
            for ci in 0..c {
                for y in 0..*height {
                    let src = &g[(ci * height + y) * width..][..*width];
                    dx[ci * h * w + (y0 + y) * w + x0..][..*width].copy_from_slice(src);
                }
            }
            res[0] = Some(Tensor::new(x.shape(), dx));
        }
        Op::Sum => {
            res[0] = Some(Tensor::full(inputs[0].shape(), grad.item()));
        }
        #[cfg(test)]
        Op::Corrupt => {
            res[0] = Some(grad.map(|g| g + g));
        }
    }
    for (i, r) in res.iter_mut().enumerate() {
        if !want(i) {
            *r = None;
        }
    }
    res
}

fn argmax_pool<T: Scalar>(x: &Tensor<T>) -> Vec<u32> {
    let [c, h, w] = *x.shape() else { unreachable!() };
    let xd = x.data();
    let mut arg = Vec::with_capacity(c * h * w / 4);
    for ci in 0..c {
        for y in 0..h / 2 {
            for xx in 0..w / 2 {
                let base = ci * h * w + 2 * y * w + 2 * xx;
                let mut best = base;
                for idx in [base + 1, base + w, base + w + 1] {
                    if xd[idx] > xd[best] {
                        best = idx;
                    }
                }
                arg.push(best as u32);
            }
        }
    }
    arg
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
        let [c, h, wd] = *x.shape() else { panic!() };
        let [o, _, kh, kw] = *w.shape() else { panic!() };
        let (ph, pw) = (kh as isize / 2, kw as isize / 2);
        let mut out = vec![0.0; o * h * wd];
        for oi in 0..o {
            for y in 0..h {
                for xx in 0..wd {
                    let mut s = b.data()[oi];
                    for ci in 0..c {
                        for i in 0..kh {
                            for j in 0..kw {
                                let sy = y as isize + i as isize - ph;
                                let sx = xx as isize + j as isize - pw;
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= wd as isize {
                                    continue;
                                }
                                s += w.data()[((oi * c + ci) * kh + i) * kw + j]
                                    * x.data()[(ci * h + sy as usize) * wd + sx as usize];
                            }
                        }
                    }
                    out[(oi * h + y) * wd + xx] = s;
                }
            }
        }
        Tensor::new([o, h, wd], out)
    }

    fn ramp(shape: &[usize], scale: f64) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|i| ((i * 37 % 11) as f64 - 5.0) * scale).collect())
    }

    #[test]
    fn conv_matches_direct_loops() {
        for (kh, kw, h, w) in [(3, 3, 5, 7), (1, 1, 4, 4), (5, 3, 6, 2), (3, 3, 1, 1)] {
            let x = ramp(&[2, h, w], 0.3);
            let wt = ramp(&[3, 2, kh, kw], 0.1);
            let b = Tensor::new([3], vec![0.5, -1.0, 0.25]);
            let (got, _) = forward(&Op::Conv2d, &[&x, &wt, &b], false).unwrap();
            let want = naive_conv(&x, &wt, &b);
            assert!(got.max_abs_diff(&want) < 1e-12, "kernel {kh}x{kw} on {h}x{w}");
        }
    }

    #[test]
    fn relu_definition() {
        let x = Tensor::<f32>::new([3], vec![-1.0, 0.0, 2.0]);
        let (y, _) = forward(&Op::Relu, &[&x], false).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let x = Tensor::<f32>::new([2], vec![0.0, 0.0]);
        let (y, _) = forward(&Op::ChannelSoftmax, &[&x], false).unwrap();
        assert_eq!(y.data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_survives_huge_logits() {
        let x = Tensor::<f32>::new([3, 1, 1], vec![1000.0, 0.0, -1000.0]);
        let (y, _) = forward(&Op::ChannelSoftmax, &[&x], false).unwrap();
        assert!(y.is_finite());
        assert_eq!(y.data()[0], 1.0);
    }

    #[test]
    fn identity_kernel_leaves_image_unchanged() {
        let x = ramp(&[1, 6, 5], 0.7).cast::<f32>();
        let w = Tensor::<f32>::new([1, 1, 1, 1], vec![1.0]);
        let b = Tensor::<f32>::zeros([1]);
        let (y, _) = forward(&Op::Conv2d, &[&x, &w, &b], false).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn same_padding_keeps_spatial_shape() {
        let x = Tensor::<f32>::zeros([3, 9, 4]);
        let w = Tensor::<f32>::zeros([5, 3, 3, 3]);
        let b = Tensor::<f32>::zeros([5]);
        let (y, _) = forward(&Op::Conv2d, &[&x, &w, &b], false).unwrap();
        assert_eq!(y.shape(), &[5, 9, 4]);
    }

    #[test]
    fn shape_errors_name_the_op() {
        let a = Tensor::<f32>::zeros([2, 3]);
        let b = Tensor::<f32>::zeros([3, 2]);
        let err = forward(&Op::Add, &[&a, &b], false).unwrap_err();
        assert!(err.to_string().starts_with("add:"), "{err}");
        assert!(err.to_string().contains("[2, 3]"));
        let x = Tensor::<f32>::zeros([3, 4, 4]);
        let w = Tensor::<f32>::zeros([2, 2, 3, 3]);
        let err = forward(&Op::Conv2d, &[&x, &w, &Tensor::zeros([2])], false).unwrap_err();
        assert!(err.to_string().starts_with("conv2d:"), "{err}");
        let err = forward(&Op::MaxPool2, &[&Tensor::<f32>::zeros([1, 3, 4])], false).unwrap_err();
        assert!(err.to_string().contains("even"));
    }

    #[test]
    fn unknown_kind_is_rejected() {
        assert_eq!("conv2d".parse::<OpKind>().unwrap(), OpKind::Conv2d);
        assert!(matches!("conv3d".parse::<OpKind>(), Err(Error::UnknownOp(_))));
    }

    #[test]
    fn softmax_flushes_vanishing_probabilities() {
        let x = Tensor::<f32>::new([3], vec![0.0, -20.0, -90.0]);
        let (y, _) = forward(&Op::ChannelSoftmax, &[&x], false).unwrap();
        assert!(y.data()[1] > 0.0);
        assert_eq!(y.data()[2], 0.0);
        assert!(y.data().iter().all(|v| !v.is_subnormal()));
    }

    #[test]
    fn log_clamps_zero() {
        let x = Tensor::<f32>::new([2], vec![0.0, 1.0]);
        let (y, _) = forward(&Op::Log, &[&x], false).unwrap();
        assert!(y.is_finite());
        assert!((y.data()[0] as f64 - LOG_FLOOR.ln()).abs() < 1e-3);
    }

    #[test]
    fn maxpool_and_upsample_shapes() {
        let x = ramp(&[2, 4, 6], 1.0);
        let (p, saved) = forward(&Op::MaxPool2, &[&x], true).unwrap();
        assert_eq!(p.shape(), &[2, 2, 3]);
        assert!(matches!(saved, Saved::Argmax(ref a) if a.len() == 12));
        let (u, _) = forward(&Op::Upsample2, &[&p], false).unwrap();
        assert_eq!(u.shape(), &[2, 4, 6]);
        assert_eq!(u.data()[0], u.data()[7]);
    }
}
