//! Forward and backward kernels for the primitive set.
//!
//! Layouts are channels-last throughout: sequences are `[B, L, C]`,
//! spatial maps are `[B, H, W, C]`.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub(crate) const NORM_EPS: f64 = 1e-5;

/// Inner block size when `b` broadcasts onto `a` along trailing singleton
/// dims (`[B, L, 1]` onto `[B, L, C]`), or 1 for identical shapes.
pub(crate) fn trailing_broadcast(op: &'static str, a: &[usize], b: &[usize]) -> Result<usize> {
    if a == b {
        return Ok(1);
    }
    if a.len() == b.len() {
        let k = a.iter().zip(b).take_while(|(x, y)| x == y).count();
        if b[k..].iter().all(|&d| d == 1) {
            return Ok(a[k..].iter().product());
        }
    }
    Err(Error::shape(
        op,
        format!("cannot combine {a:?} with {b:?} (only trailing singleton dims broadcast)"),
    ))
}

pub(crate) fn binary_fwd<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    inner: usize,
    f: impl Fn(T, T) -> T,
) -> Tensor<T> {
    let bd = b.data();
    let data = a
        .data()
        .iter()
        .enumerate()
        .map(|(i, &x)| f(x, bd[i / inner]))
        .collect();
    Tensor::from_parts(a.shape().to_vec(), data)
}

/// Sums `g` down onto the broadcast operand's shape.
pub(crate) fn reduce_broadcast<T: Scalar>(g: &[T], inner: usize, shape: &[usize]) -> Tensor<T> {
    if inner == 1 {
        return Tensor::from_parts(shape.to_vec(), g.to_vec());
    }
    let data = g.chunks_exact(inner).map(|c| c.iter().copied().sum()).collect();
    Tensor::from_parts(shape.to_vec(), data)
}

pub(crate) fn check_channel_vec(op: &'static str, x: &[usize], v: &[usize]) -> Result<usize> {
    match (x.last(), v) {
        (Some(&c), [n]) if c == *n => Ok(c),
        _ => Err(Error::shape(
            op,
            format!("vector {v:?} does not match last axis of {x:?}"),
        )),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Silu,
    Relu,
    Gelu,
    Softplus,
    Exp,
    Sigmoid,
    Abs,
    Square,
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_C: f64 = 0.044_715;

impl Unary {
    pub(crate) fn apply<T: Scalar>(self, x: T) -> T {
        let one = T::one();
        match self {
            Unary::Silu => x * sigmoid(x),
            Unary::Relu => x.max(T::zero()),
            Unary::Gelu => {
                let k = T::from_f64_lossy(GELU_K);
                let c = T::from_f64_lossy(GELU_C);
                let half = T::from_f64_lossy(0.5);
                half * x * (one + (k * (x + c * x * x * x)).tanh())
            }
            Unary::Softplus => {
                if x > T::from_f64_lossy(20.0) {
                    x
                } else {
                    x.exp().ln_1p()
                }
            }
            Unary::Exp => x.exp(),
            Unary::Sigmoid => sigmoid(x),
            Unary::Abs => x.abs(),
            Unary::Square => x * x,
        }
    }

    /// d(apply)/dx given the input and the already computed output.
    pub(crate) fn derivative<T: Scalar>(self, x: T, y: T) -> T {
        let one = T::one();
        match self {
            Unary::Silu => {
                let s = sigmoid(x);
                s * (one + x * (one - s))
            }
            Unary::Relu => {
                if x > T::zero() {
                    one
                } else {
                    T::zero()
                }
            }
            Unary::Gelu => {
                let k = T::from_f64_lossy(GELU_K);
                let c = T::from_f64_lossy(GELU_C);
                let half = T::from_f64_lossy(0.5);
                let three = T::from_f64_lossy(3.0);
                let th = (k * (x + c * x * x * x)).tanh();
                half * (one + th) + half * x * (one - th * th) * k * (one + three * c * x * x)
            }
            Unary::Softplus => sigmoid(x),
            Unary::Sigmoid => y * (one - y),
            Unary::Exp => y,
            Unary::Abs => {
                if x > T::zero() {
                    one
                } else if x < T::zero() {
                    -one
                } else {
                    T::zero()
                }
            }
            Unary::Square => x + x,
        }
    }
}

pub(crate) fn linear_check(x: &[usize], w: &[usize], b: Option<&[usize]>) -> Result<(usize, usize)> {
    let (&i, _) = x
        .split_last()
        .ok_or_else(|| Error::shape("linear", "input must have at least one axis"))?;
    if w.len() != 2 || w[0] != i {
        return Err(Error::shape(
            "linear",
            format!("weight {w:?} incompatible with input {x:?} (expected [{i}, out])"),
        ));
    }
    if let Some(b) = b {
        if b != [w[1]] {
            return Err(Error::shape(
                "linear",
                format!("bias {b:?} does not match out features {}", w[1]),
            ));
        }
    }
    Ok((i, w[1]))
}

/// `x[R, I] @ w[I, O] (+ b)` with arbitrary leading dims on `x`.
pub(crate) fn linear_fwd<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Tensor<T> {
    let (i_dim, o_dim) = (w.shape()[0], w.shape()[1]);
    let rows = x.numel() / i_dim;
    let wd = w.data();
    let mut out = vec![T::zero(); rows * o_dim];
    for (xr, yr) in x.data().chunks_exact(i_dim).zip(out.chunks_exact_mut(o_dim)) {
        if let Some(b) = b {
            yr.copy_from_slice(b.data());
        }
        for (i, &xv) in xr.iter().enumerate() {
            if xv == T::zero() {
                continue;
            }
            let wr = &wd[i * o_dim..(i + 1) * o_dim];
            for (y, &wv) in yr.iter_mut().zip(wr) {
                *y += xv * wv;
            }
        }
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().expect("nonempty") = o_dim;
    Tensor::from_parts(shape, out)
}

pub(crate) fn linear_bwd<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    g: &Tensor<T>,
    need_x: bool,
    need_w: bool,
    need_b: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>, Option<Tensor<T>>) {
    let (i_dim, o_dim) = (w.shape()[0], w.shape()[1]);
    let wd = w.data();
    let gx = need_x.then(|| {
        let mut dx = vec![T::zero(); x.numel()];
        for (dxr, gr) in dx.chunks_exact_mut(i_dim).zip(g.data().chunks_exact(o_dim)) {
            for (i, d) in dxr.iter_mut().enumerate() {
                let wr = &wd[i * o_dim..(i + 1) * o_dim];
                *d = wr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
            }
        }
        Tensor::from_parts(x.shape().to_vec(), dx)
    });
    let gw = need_w.then(|| {
        let mut dw = vec![T::zero(); i_dim * o_dim];
        for (xr, gr) in x.data().chunks_exact(i_dim).zip(g.data().chunks_exact(o_dim)) {
            for (i, &xv) in xr.iter().enumerate() {
                if xv == T::zero() {
                    continue;
                }
                let dwr = &mut dw[i * o_dim..(i + 1) * o_dim];
                for (d, &gv) in dwr.iter_mut().zip(gr) {
                    *d += xv * gv;
                }
            }
        }
        Tensor::from_parts(w.shape().to_vec(), dw)
    });
    let gb = need_b.then(|| {
        let mut db = vec![T::zero(); o_dim];
        for gr in g.data().chunks_exact(o_dim) {
            for (d, &gv) in db.iter_mut().zip(gr) {
                *d += gv;
            }
        }
        Tensor::from_parts(vec![o_dim], db)
    });
    (gx, gw, gb)
}

pub(crate) fn log_softmax_fwd<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let c = *x.shape().last().expect("nonempty");
    let mut out = Vec::with_capacity(x.numel());
    for row in x.data().chunks_exact(c) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
        out.extend(row.iter().map(|&v| v - lse));
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

pub(crate) fn log_softmax_bwd<T: Scalar>(y: &Tensor<T>, g: &Tensor<T>) -> Tensor<T> {
    let c = *y.shape().last().expect("nonempty");
    let mut out = Vec::with_capacity(y.numel());
    for (yr, gr) in y.data().chunks_exact(c).zip(g.data().chunks_exact(c)) {
        let gs: T = gr.iter().copied().sum();
        out.extend(yr.iter().zip(gr).map(|(&yv, &gv)| gv - yv.exp() * gs));
    }
    Tensor::from_parts(y.shape().to_vec(), out)
}

fn seq_dims(op: &'static str, x: &[usize]) -> Result<(usize, usize, usize)> {
    match *x {
        [b, l, c] => Ok((b, l, c)),
        _ => Err(Error::shape(op, format!("expected [B, L, C] input, got {x:?}"))),
    }
}

fn map_dims(op: &'static str, x: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *x {
        [b, h, w, c] => Ok((b, h, w, c)),
        _ => Err(Error::shape(op, format!("expected [B, H, W, C] input, got {x:?}"))),
    }
}

/// Tap offsets of a length-`k` 1-D kernel relative to the output position.
fn taps(k: usize, causal: bool) -> impl Iterator<Item = (usize, isize)> {
    let half = (k / 2) as isize;
    (0..k).map(move |j| {
        if causal {
            (j, -(j as isize))
        } else {
            (j, j as isize - half)
        }
    })
}

pub(crate) fn dwconv1d_check(x: &[usize], w: &[usize], causal: bool) -> Result<()> {
    let op = if causal { "causal_conv1d" } else { "depthwise_conv1d" };
    let (_, _, c) = seq_dims(op, x)?;
    match *w {
        [wc, k] if wc == c && (causal || k % 2 == 1) => Ok(()),
        [_, k] if !causal && k % 2 == 0 => Err(Error::shape(
            op,
            format!("centered kernel size must be odd, got {k}"),
        )),
        _ => Err(Error::shape(op, format!("kernel {w:?} does not match input {x:?} (expected [{c}, k])"))),
    }
}

pub(crate) fn dwconv1d_fwd<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, causal: bool) -> Tensor<T> {
    let (b, l, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let k = w.shape()[1];
    let (xd, wd) = (x.data(), w.data());
    let mut out = vec![T::zero(); x.numel()];
    for bi in 0..b {
        let base = bi * l * c;
        for t in 0..l {
            let yr = &mut out[base + t * c..base + (t + 1) * c];
            for (j, off) in taps(k, causal) {
                let s = t as isize + off;
                if s < 0 || s >= l as isize {
                    continue;
                }
                let xr = &xd[base + s as usize * c..base + (s as usize + 1) * c];
                for ch in 0..c {
                    yr[ch] += wd[ch * k + j] * xr[ch];
                }
            }
        }
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

pub(crate) fn dwconv1d_bwd<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    g: &Tensor<T>,
    causal: bool,
) -> (Tensor<T>, Tensor<T>) {
    let (b, l, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let k = w.shape()[1];
    let (xd, wd, gd) = (x.data(), w.data(), g.data());
    let mut dx = vec![T::zero(); x.numel()];
    let mut dw = vec![T::zero(); w.numel()];
    for bi in 0..b {
        let base = bi * l * c;
        for t in 0..l {
            let gr = &gd[base + t * c..base + (t + 1) * c];
            for (j, off) in taps(k, causal) {
                let s = t as isize + off;
                if s < 0 || s >= l as isize {
                    continue;
                }
                let so = base + s as usize * c;
                for ch in 0..c {
                    dx[so + ch] += wd[ch * k + j] * gr[ch];
                    dw[ch * k + j] += xd[so + ch] * gr[ch];
                }
            }
        }
    }
    (
        Tensor::from_parts(x.shape().to_vec(), dx),
        Tensor::from_parts(w.shape().to_vec(), dw),
    )
}

pub(crate) fn conv1d_check(x: &[usize], w: &[usize]) -> Result<usize> {
    let (_, _, c) = seq_dims("conv1d", x)?;
    match *w {
        [k, i, o] if i == c && k % 2 == 1 => Ok(o),
        [k, _, _] if k % 2 == 0 => Err(Error::shape(
            "conv1d",
            format!("kernel size must be odd, got {k}"),
        )),
        _ => Err(Error::shape(
            "conv1d",
            format!("kernel {w:?} does not match input {x:?} (expected [k, {c}, out])"),
        )),
    }
}

/// Regular (full channel mixing) centered 1-D convolution, `w: [k, I, O]`.
pub(crate) fn conv1d_fwd<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>) -> Tensor<T> {
    let (b, l, i_dim) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (k, o_dim) = (w.shape()[0], w.shape()[2]);
    let (xd, wd) = (x.data(), w.data());
    let mut out = vec![T::zero(); b * l * o_dim];
    for bi in 0..b {
        for t in 0..l {
            let yo = (bi * l + t) * o_dim;
            for (j, off) in taps(k, false) {
                let s = t as isize + off;
                if s < 0 || s >= l as isize {
                    continue;
                }
                let xr = &xd[(bi * l + s as usize) * i_dim..][..i_dim];
                for (i, &xv) in xr.iter().enumerate() {
                    let wr = &wd[(j * i_dim + i) * o_dim..][..o_dim];
                    for (y, &wv) in out[yo..yo + o_dim].iter_mut().zip(wr) {
                        *y += xv * wv;
                    }
                }
            }
        }
    }
    Tensor::from_parts(vec![b, l, o_dim], out)
}

pub(crate) fn conv1d_bwd<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    g: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let (b, l, i_dim) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (k, o_dim) = (w.shape()[0], w.shape()[2]);
    let (xd, wd, gd) = (x.data(), w.data(), g.data());
    let mut dx = vec![T::zero(); x.numel()];
    let mut dw = vec![T::zero(); w.numel()];
    for bi in 0..b {
        for t in 0..l {
            let gr = &gd[(bi * l + t) * o_dim..][..o_dim];
            for (j, off) in taps(k, false) {
                let s = t as isize + off;
                if s < 0 || s >= l as isize {
                    continue;
                }
                let xo = (bi * l + s as usize) * i_dim;
                for i in 0..i_dim {
                    let wo = (j * i_dim + i) * o_dim;
                    let wr = &wd[wo..wo + o_dim];
                    dx[xo + i] += wr.iter().zip(gr).map(|(&a, &b)| a * b).sum::<T>();
                    let xv = xd[xo + i];
                    for (d, &gv) in dw[wo..wo + o_dim].iter_mut().zip(gr) {
                        *d += xv * gv;
                    }
                }
            }
        }
    }
    (
        Tensor::from_parts(x.shape().to_vec(), dx),
        Tensor::from_parts(w.shape().to_vec(), dw),
    )
}

pub(crate) fn dwconv2d_check(x: &[usize], w: &[usize]) -> Result<()> {
    let (_, _, _, c) = map_dims("depthwise_conv2d", x)?;
    match *w {
        [wc, kh, kw] if wc == c && kh == kw && kh % 2 == 1 => Ok(()),
        _ => Err(Error::shape(
            "depthwise_conv2d",
            format!("kernel {w:?} does not match input {x:?} (expected [{c}, k, k] with odd k)"),
        )),
    }
}

/// Centered, zero-padded depthwise 2-D convolution, `w: [C, k, k]`.
pub(crate) fn dwconv2d_fwd<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let (b, h, wd_, c) = (s[0], s[1], s[2], s[3]);
    let k = w.shape()[1];
    let half = (k / 2) as isize;
    let (xd, wd) = (x.data(), w.data());
    let mut out = vec![T::zero(); x.numel()];
    for bi in 0..b {
        for y in 0..h {
            for xx in 0..wd_ {
                let yo = ((bi * h + y) * wd_ + xx) * c;
                for ky in 0..k {
                    let sy = y as isize + ky as isize - half;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let sx = xx as isize + kx as isize - half;
                        if sx < 0 || sx >= wd_ as isize {
                            continue;
                        }
                        let xo = ((bi * h + sy as usize) * wd_ + sx as usize) * c;
                        for ch in 0..c {
                            out[yo + ch] += wd[(ch * k + ky) * k + kx] * xd[xo + ch];
                        }
                    }
                }
            }
        }
    }
    Tensor::from_parts(s.to_vec(), out)
}

pub(crate) fn dwconv2d_bwd<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    g: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let s = x.shape();
    let (b, h, wd_, c) = (s[0], s[1], s[2], s[3]);
    let k = w.shape()[1];
    let half = (k / 2) as isize;
    let (xd, wd, gd) = (x.data(), w.data(), g.data());
    let mut dx = vec![T::zero(); x.numel()];
    let mut dw = vec![T::zero(); w.numel()];
    for bi in 0..b {
        for y in 0..h {
            for xx in 0..wd_ {
                let yo = ((bi * h + y) * wd_ + xx) * c;
                for ky in 0..k {
                    let sy = y as isize + ky as isize - half;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let sx = xx as isize + kx as isize - half;
                        if sx < 0 || sx >= wd_ as isize {
                            continue;
                        }
                        let xo = ((bi * h + sy as usize) * wd_ + sx as usize) * c;
                        for ch in 0..c {
                            let wi = (ch * k + ky) * k + kx;
                            dx[xo + ch] += wd[wi] * gd[yo + ch];
                            dw[wi] += xd[xo + ch] * gd[yo + ch];
                        }
                    }
                }
            }
        }
    }
    (
        Tensor::from_parts(s.to_vec(), dx),
        Tensor::from_parts(w.shape().to_vec(), dw),
    )
}

pub(crate) fn conv2d_check(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Result<Vec<usize>> {
    let (b, h, wi, c) = map_dims("conv2d", x)?;
    let (k, o) = match *w {
        [kh, kw, i, o] if kh == kw && i == c => (kh, o),
        _ => {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {w:?} does not match input {x:?} (expected [k, k, {c}, out])"),
            ))
        }
    };
    if stride == 0 || h + 2 * pad < k || wi + 2 * pad < k {
        return Err(Error::shape(
            "conv2d",
            format!("input {x:?} too small for kernel {k} (pad {pad}, stride {stride})"),
        ));
    }
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wi + 2 * pad - k) / stride + 1;
    Ok(vec![b, ho, wo, o])
}

/// Dense 2-D convolution, `w: [k, k, I, O]`, symmetric zero padding.
pub(crate) fn conv2d_fwd<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    pad: usize,
    out_shape: &[usize],
) -> Tensor<T> {
    let s = x.shape();
    let (h, wi, i_dim) = (s[1], s[2], s[3]);
    let (k, o_dim) = (w.shape()[0], w.shape()[3]);
    let (b, ho, wo) = (out_shape[0], out_shape[1], out_shape[2]);
    let (xd, wd) = (x.data(), w.data());
    let mut out = vec![T::zero(); b * ho * wo * o_dim];
    for bi in 0..b {
        for oy in 0..ho {
            for ox in 0..wo {
                let yo = ((bi * ho + oy) * wo + ox) * o_dim;
                for ky in 0..k {
                    let sy = (oy * stride + ky) as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let sx = (ox * stride + kx) as isize - pad as isize;
                        if sx < 0 || sx >= wi as isize {
                            continue;
                        }
                        let xo = ((bi * h + sy as usize) * wi + sx as usize) * i_dim;
                        for i in 0..i_dim {
                            let xv = xd[xo + i];
                            let wr = &wd[((ky * k + kx) * i_dim + i) * o_dim..][..o_dim];
                            for (y, &wv) in out[yo..yo + o_dim].iter_mut().zip(wr) {
                                *y += xv * wv;
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::from_parts(out_shape.to_vec(), out)
}

pub(crate) fn conv2d_bwd<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    g: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> (Tensor<T>, Tensor<T>) {
    let s = x.shape();
    let (h, wi, i_dim) = (s[1], s[2], s[3]);
    let (k, o_dim) = (w.shape()[0], w.shape()[3]);
    let gs = g.shape();
    let (b, ho, wo) = (gs[0], gs[1], gs[2]);
    let (xd, wd, gd) = (x.data(), w.data(), g.data());
    let mut dx = vec![T::zero(); x.numel()];
    let mut dw = vec![T::zero(); w.numel()];
    for bi in 0..b {
        for oy in 0..ho {
            for ox in 0..wo {
                let gr = &gd[((bi * ho + oy) * wo + ox) * o_dim..][..o_dim];
                for ky in 0..k {
                    let sy = (oy * stride + ky) as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let sx = (ox * stride + kx) as isize - pad as isize;
                        if sx < 0 || sx >= wi as isize {
                            continue;
                        }
                        let xo = ((bi * h + sy as usize) * wi + sx as usize) * i_dim;
                        for i in 0..i_dim {
                            let wofs = ((ky * k + kx) * i_dim + i) * o_dim;
                            let wr = &wd[wofs..wofs + o_dim];
                            dx[xo + i] += wr.iter().zip(gr).map(|(&a, &b)| a * b).sum::<T>();
                            let xv = xd[xo + i];
                            for (d, &gv) in dw[wofs..wofs + o_dim].iter_mut().zip(gr) {
                                *d += xv * gv;
                            }
                        }
                    }
                }
            }
        }
    }
    (
        Tensor::from_parts(s.to_vec(), dx),
        Tensor::from_parts(w.shape().to_vec(), dw),
    )
}

/// Per-channel mean and biased variance over every axis but the last.
pub(crate) fn channel_moments<T: Scalar>(x: &Tensor<T>) -> (Vec<T>, Vec<T>) {
    let c = *x.shape().last().expect("nonempty");
    let m = T::from_usize_lossy(x.numel() / c);
    let mut mean = vec![T::zero(); c];
    for row in x.rows() {
        for (a, &v) in mean.iter_mut().zip(row) {
            *a += v;
        }
    }
    mean.iter_mut().for_each(|v| *v /= m);
    let mut var = vec![T::zero(); c];
    for row in x.rows() {
        for ((a, &v), &mu) in var.iter_mut().zip(row).zip(&mean) {
            *a += (v - mu) * (v - mu);
        }
    }
    var.iter_mut().for_each(|v| *v /= m);
    (mean, var)
}

/// Normalizes rows along the last axis with per-channel statistics and
/// returns `(xhat, inv_std)`.
pub(crate) fn bn_normalize<T: Scalar>(x: &Tensor<T>, mean: &[T], var: &[T]) -> (Vec<T>, Vec<T>) {
    let eps = T::from_f64_lossy(NORM_EPS);
    let inv: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = Vec::with_capacity(x.numel());
    for row in x.rows() {
        xhat.extend(row.iter().enumerate().map(|(c, &v)| (v - mean[c]) * inv[c]));
    }
    (xhat, inv)
}

/// Backward of batch-norm w.r.t. `x` when statistics come from the batch.
pub(crate) fn bn_train_bwd<T: Scalar>(xhat: &[T], inv: &[T], gamma: &[T], g: &[T]) -> Vec<T> {
    let c = inv.len();
    let m = T::from_usize_lossy(xhat.len() / c);
    let mut sum_g = vec![T::zero(); c];
    let mut sum_gx = vec![T::zero(); c];
    for (xr, gr) in xhat.chunks_exact(c).zip(g.chunks_exact(c)) {
        for ch in 0..c {
            let dxh = gr[ch] * gamma[ch];
            sum_g[ch] += dxh;
            sum_gx[ch] += dxh * xr[ch];
        }
    }
    let mut dx = Vec::with_capacity(xhat.len());
    for (xr, gr) in xhat.chunks_exact(c).zip(g.chunks_exact(c)) {
        for ch in 0..c {
            let dxh = gr[ch] * gamma[ch];
            dx.push(inv[ch] / m * (m * dxh - sum_g[ch] - xr[ch] * sum_gx[ch]));
        }
    }
    dx
}

/// Gradients of the affine part `gamma * xhat + beta`.
pub(crate) fn affine_bwd<T: Scalar>(xhat: &[T], g: &[T], c: usize) -> (Vec<T>, Vec<T>) {
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for (xr, gr) in xhat.chunks_exact(c).zip(g.chunks_exact(c)) {
        for ch in 0..c {
            dgamma[ch] += gr[ch] * xr[ch];
            dbeta[ch] += gr[ch];
        }
    }
    (dgamma, dbeta)
}

/// Row-wise normalization along the last axis; returns `(xhat, inv_std)`.
pub(crate) fn ln_normalize<T: Scalar>(x: &Tensor<T>) -> (Vec<T>, Vec<T>) {
    let c = *x.shape().last().expect("nonempty");
    let n = T::from_usize_lossy(c);
    let eps = T::from_f64_lossy(NORM_EPS);
    let mut xhat = Vec::with_capacity(x.numel());
    let mut invs = Vec::with_capacity(x.numel() / c);
    for row in x.rows() {
        let mu = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / n;
        let inv = T::one() / (var + eps).sqrt();
        xhat.extend(row.iter().map(|&v| (v - mu) * inv));
        invs.push(inv);
    }
    (xhat, invs)
}

pub(crate) fn ln_bwd<T: Scalar>(xhat: &[T], inv: &[T], gamma: &[T], g: &[T]) -> Vec<T> {
    let c = gamma.len();
    let n = T::from_usize_lossy(c);
    let mut dx = Vec::with_capacity(xhat.len());
    for ((xr, gr), &iv) in xhat.chunks_exact(c).zip(g.chunks_exact(c)).zip(inv) {
        let mut sg = T::zero();
        let mut sgx = T::zero();
        for ch in 0..c {
            let d = gr[ch] * gamma[ch];
            sg += d;
            sgx += d * xr[ch];
        }
        for ch in 0..c {
            let d = gr[ch] * gamma[ch];
            dx.push(iv / n * (n * d - sg - xr[ch] * sgx));
        }
    }
    dx
}

/// Row-major strides for a shape.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

pub(crate) fn permute_check(shape: &[usize], perm: &[usize]) -> Result<Vec<usize>> {
    let mut seen = vec![false; shape.len()];
    if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
        return Err(Error::shape(
            "permute",
            format!("{perm:?} is not a permutation of the axes of {shape:?}"),
        ));
    }
    Ok(perm.iter().map(|&p| shape[p]).collect())
}

/// Gathers `x` into the permuted layout; `out[i] = x[src(i)]`.
pub(crate) fn permute_fwd<T: Scalar>(x: &Tensor<T>, perm: &[usize], out_shape: &[usize]) -> Tensor<T> {
    let in_strides = strides(x.shape());
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let xd = x.data();
    let mut idx = vec![0usize; out_shape.len()];
    let mut out = Vec::with_capacity(x.numel());
    for _ in 0..x.numel() {
        let off: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
        out.push(xd[off]);
        for ax in (0..idx.len()).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    Tensor::from_parts(out_shape.to_vec(), out)
}

pub(crate) fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

pub(crate) fn flip_fwd<T: Scalar>(x: &Tensor<T>, axis: usize) -> Tensor<T> {
    let shape = x.shape();
    let outer: usize = shape[..axis].iter().product();
    let n = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let xd = x.data();
    let mut out = Vec::with_capacity(x.numel());
    for o in 0..outer {
        for t in (0..n).rev() {
            out.extend_from_slice(&xd[(o * n + t) * inner..][..inner]);
        }
    }
    Tensor::from_parts(shape.to_vec(), out)
}

pub(crate) fn concat_last<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let ca = *a.shape().last().expect("nonempty");
    let cb = *b.shape().last().expect("nonempty");
    let mut out = Vec::with_capacity(a.numel() + b.numel());
    for (ra, rb) in a.data().chunks_exact(ca).zip(b.data().chunks_exact(cb)) {
        out.extend_from_slice(ra);
        out.extend_from_slice(rb);
    }
    let mut shape = a.shape().to_vec();
    *shape.last_mut().expect("nonempty") = ca + cb;
    Tensor::from_parts(shape, out)
}

pub(crate) fn slice_last<T: Scalar>(x: &Tensor<T>, start: usize, len: usize) -> Tensor<T> {
    let c = *x.shape().last().expect("nonempty");
    let mut out = Vec::with_capacity(x.numel() / c * len);
    for row in x.data().chunks_exact(c) {
        out.extend_from_slice(&row[start..start + len]);
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().expect("nonempty") = len;
    Tensor::from_parts(shape, out)
}

/// Sum over one axis, removing it.
pub(crate) fn sum_axis_fwd<T: Scalar>(x: &Tensor<T>, axis: usize) -> Tensor<T> {
    let shape = x.shape();
    let outer: usize = shape[..axis].iter().product();
    let n = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let xd = x.data();
    let mut out = vec![T::zero(); outer * inner];
    for o in 0..outer {
        let dst = &mut out[o * inner..(o + 1) * inner];
        for t in 0..n {
            for (d, &v) in dst.iter_mut().zip(&xd[(o * n + t) * inner..][..inner]) {
                *d += v;
            }
        }
    }
    let mut out_shape = shape.to_vec();
    out_shape.remove(axis);
    Tensor::from_parts(out_shape, out)
}

/// Broadcasts `g` (the reduced gradient) back along `axis` scaled by `scale`.
pub(crate) fn expand_axis<T: Scalar>(g: &Tensor<T>, in_shape: &[usize], axis: usize, scale: T) -> Tensor<T> {
    let outer: usize = in_shape[..axis].iter().product();
    let n = in_shape[axis];
    let inner: usize = in_shape[axis + 1..].iter().product();
    let gd = g.data();
    let mut out = Vec::with_capacity(outer * n * inner);
    for o in 0..outer {
        let src = &gd[o * inner..(o + 1) * inner];
        for _ in 0..n {
            out.extend(src.iter().map(|&v| v * scale));
        }
    }
    Tensor::from_parts(in_shape.to_vec(), out)
}

pub(crate) fn upsample_fwd<T: Scalar>(x: &Tensor<T>, f: usize) -> Tensor<T> {
    let s = x.shape();
    let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
    let xd = x.data();
    let mut out = Vec::with_capacity(x.numel() * f * f);
    for bi in 0..b {
        for y in 0..h * f {
            for xx in 0..w * f {
                let src = ((bi * h + y / f) * w + xx / f) * c;
                out.extend_from_slice(&xd[src..src + c]);
            }
        }
    }
    Tensor::from_parts(vec![b, h * f, w * f, c], out)
}

pub(crate) fn upsample_bwd<T: Scalar>(g: &Tensor<T>, in_shape: &[usize], f: usize) -> Tensor<T> {
    let (b, h, w, c) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let gd = g.data();
    let mut dx = vec![T::zero(); b * h * w * c];
    for bi in 0..b {
        for y in 0..h * f {
            for xx in 0..w * f {
                let src = ((bi * h * f + y) * w * f + xx) * c;
                let dst = ((bi * h + y / f) * w + xx / f) * c;
                for ch in 0..c {
                    dx[dst + ch] += gd[src + ch];
                }
            }
        }
    }
    Tensor::from_parts(in_shape.to_vec(), dx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_rules() {
        assert_eq!(trailing_broadcast("t", &[2, 3, 4], &[2, 3, 4]).unwrap(), 1);
        assert_eq!(trailing_broadcast("t", &[2, 3, 4], &[2, 3, 1]).unwrap(), 4);
        assert_eq!(trailing_broadcast("t", &[2, 3, 4], &[2, 1, 1]).unwrap(), 12);
        assert!(trailing_broadcast("t", &[2, 3, 4], &[1, 3, 4]).is_err());
        assert!(trailing_broadcast("t", &[2, 3, 4], &[3, 4]).is_err());
    }

    #[test]
    fn permute_transposes() {
        let x = Tensor::<f64>::from_fn(&[2, 3], |i| i as f64);
        let y = permute_fwd(&x, &[1, 0], &[3, 2]);
        assert_eq!(y.data(), &[0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
    }

    #[test]
    fn strides_row_major() {
        assert_eq!(strides(&[2, 3, 4]), vec![12, 4, 1]);
    }

    #[test]
    fn softplus_zero_is_ln2() {
        let v = Unary::Softplus.apply(0.0f64);
        assert!((v - std::f64::consts::LN_2).abs() < 1e-15);
    }
}
