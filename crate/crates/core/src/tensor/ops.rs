//! Forward and backward kernels for the non-convolution primitives.
//!
//! These work on plain tensors. [`GradTape`](super::GradTape) records them
//! and calls the matching `*_backward` function during the reverse pass.

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
}

/// How `b` lines up against `a` in a binary op.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Broadcast {
    None,
    /// `b` has extent 1 on axis 1 and is repeated across `a`'s channels.
    Channel { outer: usize, channels: usize, inner: usize },
}

pub fn broadcast_rule<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Broadcast> {
    if a.shape() == b.shape() {
        return Ok(Broadcast::None);
    }
    let (sa, sb) = (a.shape(), b.shape());
    let channel_ok = sa.len() >= 2
        && sa.len() == sb.len()
        && sb[1] == 1
        && sa.iter().zip(sb).enumerate().all(|(i, (x, y))| i == 1 || x == y);
    if channel_ok {
        Ok(Broadcast::Channel {
            outer: sa[0],
            channels: sa[1],
            inner: sa[2..].iter().product(),
        })
    } else {
        Err(Error::shape(
            "elementwise",
            format!("cannot combine {sa:?} with {sb:?}; only equal shapes or a channel extent of 1 broadcast"),
        ))
    }
}

fn b_index(rule: Broadcast, i: usize) -> usize {
    match rule {
        Broadcast::None => i,
        Broadcast::Channel { channels, inner, .. } => {
            let n = i / (channels * inner);
            n * inner + i % inner
        }
    }
}

pub fn binary<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, kind: BinaryKind) -> Result<Tensor<T>> {
    let rule = broadcast_rule(a, b)?;
    let (ad, bd) = (a.data(), b.data());
    let data = (0..ad.len())
        .map(|i| {
            let (x, y) = (ad[i], bd[b_index(rule, i)]);
            match kind {
                BinaryKind::Add => x + y,
                BinaryKind::Sub => x - y,
                BinaryKind::Mul => x * y,
            }
        })
        .collect();
    Tensor::new(a.shape(), data)
}

/// Returns the gradients for `a` and `b`; broadcast gradients are summed
/// over the repeated axis.
pub fn binary_backward<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    kind: BinaryKind,
    g: &[T],
) -> (Vec<T>, Vec<T>) {
    let rule = broadcast_rule(a, b).expect("validated in forward");
    let (ad, bd) = (a.data(), b.data());
    let mut ga = vec![T::zero(); ad.len()];
    let mut gb = vec![T::zero(); bd.len()];
    for i in 0..ad.len() {
        let j = b_index(rule, i);
        match kind {
            BinaryKind::Add => {
                ga[i] = g[i];
                gb[j] += g[i];
            }
            BinaryKind::Sub => {
                ga[i] = g[i];
                gb[j] -= g[i];
            }
            BinaryKind::Mul => {
                ga[i] = g[i] * bd[j];
                gb[j] += g[i] * ad[i];
            }
        }
    }
    (ga, gb)
}

pub fn leaky_relu<T: Scalar>(x: &Tensor<T>, slope: T) -> Tensor<T> {
    x.map(|v| if v >= T::zero() { v } else { slope * v })
}

pub fn leaky_relu_backward<T: Scalar>(x: &Tensor<T>, slope: T, g: &[T]) -> Vec<T> {
    x.data()
        .iter()
        .zip(g)
        .map(|(&v, &gv)| if v >= T::zero() { gv } else { slope * gv })
        .collect()
}

pub fn sigmoid<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| T::one() / (T::one() + (-v).exp()))
}

/// Uses the forward output `y`: dσ/dx = y(1 − y).
pub fn sigmoid_backward<T: Scalar>(y: &Tensor<T>, g: &[T]) -> Vec<T> {
    y.data()
        .iter()
        .zip(g)
        .map(|(&s, &gv)| gv * s * (T::one() - s))
        .collect()
}

/// Half-open `[start, end)` input range of adaptive pooling bin `i`.
pub fn adaptive_bin(i: usize, input: usize, output: usize) -> (usize, usize) {
    let start = (i * input) / output;
    let end = ((i + 1) * input).div_ceil(output);
    (start, end)
}

pub fn adaptive_avg_pool<T: Scalar>(x: &Tensor<T>, out_hw: (usize, usize)) -> Result<Tensor<T>> {
    let (b, c, h, w) = x.dims4("adaptive_avg_pool")?;
    let (oh, ow) = out_hw;
    if oh == 0 || ow == 0 {
        return Err(Error::invalid("adaptive_avg_pool", "output extents must be positive"));
    }
    let xd = x.data();
    let mut out = Vec::with_capacity(b * c * oh * ow);
    for plane in 0..b * c {
        let base = plane * h * w;
        for oy in 0..oh {
            let (y0, y1) = adaptive_bin(oy, h, oh);
            for ox in 0..ow {
                let (x0, x1) = adaptive_bin(ox, w, ow);
                let mut acc = T::zero();
                for yy in y0..y1 {
                    for xx in x0..x1 {
                        acc += xd[base + yy * w + xx];
                    }
                }
                out.push(acc / T::lit(((y1 - y0) * (x1 - x0)) as f64));
            }
        }
    }
    Tensor::new(&[b, c, oh, ow], out)
}

pub fn adaptive_avg_pool_backward<T: Scalar>(in_shape: &[usize], out_hw: (usize, usize), g: &[T]) -> Vec<T> {
    let (h, w) = (in_shape[2], in_shape[3]);
    let planes = in_shape[0] * in_shape[1];
    let (oh, ow) = out_hw;
    let mut gx = vec![T::zero(); planes * h * w];
    for plane in 0..planes {
        for oy in 0..oh {
            let (y0, y1) = adaptive_bin(oy, h, oh);
            for ox in 0..ow {
                let (x0, x1) = adaptive_bin(ox, w, ow);
                let share = g[(plane * oh + oy) * ow + ox] / T::lit(((y1 - y0) * (x1 - x0)) as f64);
                for yy in y0..y1 {
                    for xx in x0..x1 {
                        gx[plane * h * w + yy * w + xx] += share;
                    }
                }
            }
        }
    }
    gx
}

/// Source taps `(i0, i1, frac)` for align-corners-false linear resampling
/// along one axis.
pub fn linear_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|i| {
            let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

pub fn bilinear_upsample<T: Scalar>(x: &Tensor<T>, out_hw: (usize, usize)) -> Result<Tensor<T>> {
    let (b, c, h, w) = x.dims4("bilinear_upsample")?;
    let (oh, ow) = out_hw;
    if oh < h || ow < w {
        return Err(Error::invalid(
            "bilinear_upsample",
            format!("cannot downsample {h}x{w} to {oh}x{ow}"),
        ));
    }
    let ty = linear_taps(h, oh);
    let tx = linear_taps(w, ow);
    let xd = x.data();
    let mut out = Vec::with_capacity(b * c * oh * ow);
    for plane in 0..b * c {
        let p = &xd[plane * h * w..(plane + 1) * h * w];
        for &(y0, y1, fy) in &ty {
            let fy = T::lit(fy);
            for &(x0, x1, fx) in &tx {
                let fx = T::lit(fx);
                let top = p[y0 * w + x0] * (T::one() - fx) + p[y0 * w + x1] * fx;
                let bot = p[y1 * w + x0] * (T::one() - fx) + p[y1 * w + x1] * fx;
                out.push(top * (T::one() - fy) + bot * fy);
            }
        }
    }
    Tensor::new(&[b, c, oh, ow], out)
}

pub fn bilinear_upsample_backward<T: Scalar>(in_shape: &[usize], out_hw: (usize, usize), g: &[T]) -> Vec<T> {
    let (h, w) = (in_shape[2], in_shape[3]);
    let planes = in_shape[0] * in_shape[1];
    let (oh, ow) = out_hw;
    let ty = linear_taps(h, oh);
    let tx = linear_taps(w, ow);
    let mut gx = vec![T::zero(); planes * h * w];
    for plane in 0..planes {
        let gp = &mut gx[plane * h * w..(plane + 1) * h * w];
        let go = &g[plane * oh * ow..(plane + 1) * oh * ow];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let fy = T::lit(fy);
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let fx = T::lit(fx);
                let v = go[oy * ow + ox];
                let top = v * (T::one() - fy);
                let bot = v * fy;
                gp[y0 * w + x0] += top * (T::one() - fx);
                gp[y0 * w + x1] += top * fx;
                gp[y1 * w + x0] += bot * (T::one() - fx);
                gp[y1 * w + x1] += bot * fx;
            }
        }
    }
    gx
}

/// Spatial window `[y0, y0+h) × [x0, x0+w)` of a 4-D tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub y0: usize,
    pub x0: usize,
    pub h: usize,
    pub w: usize,
}

pub fn crop<T: Scalar>(x: &Tensor<T>, win: Window) -> Result<Tensor<T>> {
    let (b, c, h, w) = x.dims4("crop")?;
    if win.h == 0 || win.w == 0 || win.y0 + win.h > h || win.x0 + win.w > w {
        return Err(Error::shape(
            "crop",
            format!("window {win:?} does not fit a {h}x{w} map"),
        ));
    }
    let xd = x.data();
    let mut out = Vec::with_capacity(b * c * win.h * win.w);
    for plane in 0..b * c {
        for yy in 0..win.h {
            let row = plane * h * w + (win.y0 + yy) * w + win.x0;
            out.extend_from_slice(&xd[row..row + win.w]);
        }
    }
    Tensor::new(&[b, c, win.h, win.w], out)
}

pub fn crop_backward<T: Scalar>(in_shape: &[usize], win: Window, g: &[T]) -> Vec<T> {
    let (h, w) = (in_shape[2], in_shape[3]);
    let planes = in_shape[0] * in_shape[1];
    let mut gx = vec![T::zero(); planes * h * w];
    for plane in 0..planes {
        for yy in 0..win.h {
            let dst = plane * h * w + (win.y0 + yy) * w + win.x0;
            let src = (plane * win.h + yy) * win.w;
            gx[dst..dst + win.w].copy_from_slice(&g[src..src + win.w]);
        }
    }
    gx
}

/// Concatenates along axis 1. All parts must agree on every other axis.
pub fn concat_channels<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::invalid("concat_channels", "no inputs"))?;
    let shape = first.shape();
    if shape.len() < 2 {
        return Err(Error::shape("concat_channels", "inputs need a channel axis"));
    }
    for p in parts {
        let s = p.shape();
        if s.len() != shape.len() || s[0] != shape[0] || s[2..] != shape[2..] {
            return Err(Error::shape(
                "concat_channels",
                format!("cannot concatenate {s:?} with {shape:?}"),
            ));
        }
    }
    let inner: usize = shape[2..].iter().product();
    let total_c: usize = parts.iter().map(|p| p.shape()[1]).sum();
    let mut out = Vec::with_capacity(shape[0] * total_c * inner);
    for n in 0..shape[0] {
        for p in parts {
            let len = p.shape()[1] * inner;
            out.extend_from_slice(&p.data()[n * len..(n + 1) * len]);
        }
    }
    let mut out_shape = shape.to_vec();
    out_shape[1] = total_c;
    Tensor::new(&out_shape, out)
}

pub fn concat_channels_backward<T: Scalar>(shapes: &[Vec<usize>], g: &[T]) -> Vec<Vec<T>> {
    let batch = shapes[0][0];
    let inner: usize = shapes[0][2..].iter().product();
    let total_c: usize = shapes.iter().map(|s| s[1]).sum();
    let mut grads: Vec<Vec<T>> = shapes
        .iter()
        .map(|s| Vec::with_capacity(s.iter().product()))
        .collect();
    for n in 0..batch {
        let mut c0 = 0;
        for (s, gp) in shapes.iter().zip(&mut grads) {
            let start = (n * total_c + c0) * inner;
            gp.extend_from_slice(&g[start..start + s[1] * inner]);
            c0 += s[1];
        }
    }
    grads
}

/// Cosine similarity along the channel axis of two `B×C×H×W` tensors,
/// giving `B×1×H×W`. The denominator is `max(‖a‖·‖b‖, eps)`.
pub fn cosine_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
    let (n, c, h, w) = a.dims4("cosine_similarity")?;
    if a.shape() != b.shape() {
        return Err(Error::shape(
            "cosine_similarity",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let hw = h * w;
    let (ad, bd) = (a.data(), b.data());
    let mut out = Vec::with_capacity(n * hw);
    for bi in 0..n {
        for p in 0..hw {
            let (mut dot, mut na, mut nb) = (T::zero(), T::zero(), T::zero());
            for ch in 0..c {
                let i = (bi * c + ch) * hw + p;
                dot += ad[i] * bd[i];
                na += ad[i] * ad[i];
                nb += bd[i] * bd[i];
            }
            out.push(dot / (na.sqrt() * nb.sqrt()).max(eps));
        }
    }
    Tensor::new(&[n, 1, h, w], out)
}

pub fn cosine_channels_backward<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    eps: T,
    g: &[T],
) -> (Vec<T>, Vec<T>) {
    let s = a.shape();
    let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
    let (ad, bd) = (a.data(), b.data());
    let mut ga = vec![T::zero(); ad.len()];
    let mut gb = vec![T::zero(); bd.len()];
    for bi in 0..n {
        for p in 0..hw {
            let (mut dot, mut na2, mut nb2) = (T::zero(), T::zero(), T::zero());
            for ch in 0..c {
                let i = (bi * c + ch) * hw + p;
                dot += ad[i] * bd[i];
                na2 += ad[i] * ad[i];
                nb2 += bd[i] * bd[i];
            }
            let prod = na2.sqrt() * nb2.sqrt();
            let gv = g[bi * hw + p];
            for ch in 0..c {
                let i = (bi * c + ch) * hw + p;
                if prod > eps {
                    let cos = dot / prod;
                    ga[i] = gv * (bd[i] / prod - cos * ad[i] / na2);
                    gb[i] = gv * (ad[i] / prod - cos * bd[i] / nb2);
                } else {
                    ga[i] = gv * bd[i] / eps;
                    gb[i] = gv * ad[i] / eps;
                }
            }
        }
    }
    (ga, gb)
}

pub fn mse<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<T> {
    if pred.shape() != target.shape() {
        return Err(Error::shape(
            "mse_loss",
            format!("prediction {:?} vs target {:?}", pred.shape(), target.shape()),
        ));
    }
    let n = T::lit(pred.numel() as f64);
    let s: T = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| (p - t) * (p - t))
        .sum();
    Ok(s / n)
}
