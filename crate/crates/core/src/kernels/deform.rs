//! Modulated deformable convolution.
//!
//! Each kernel tap `k` at output position `p` reads the input at
//! `p + p_k + Δp_k` (bilinear interpolation, zero outside the image) and the
//! sample is scaled by the modulation `Δm_k` before the weighted sum.

use super::conv2d::{output_shape, Conv2dGeometry, ConvSpec};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Per-location sampling offsets and modulation masks.
#[derive(Debug, Clone)]
pub struct DeformField<T> {
    /// `B × 2N × H_out × W_out`; channel `2k` is the row offset of tap `k`
    /// and channel `2k + 1` the column offset.
    pub offsets: Tensor<T>,
    /// `B × N × H_out × W_out`, each value in `[0, 1]`.
    pub masks: Tensor<T>,
}

impl<T: Scalar> DeformField<T> {
    /// Zero offsets with unit masks, which turns deformable convolution into
    /// vanilla convolution.
    pub fn identity(batch: usize, taps: usize, out_hw: (usize, usize)) -> Result<Self> {
        Ok(Self {
            offsets: Tensor::zeros(&[batch, 2 * taps, out_hw.0, out_hw.1])?,
            masks: Tensor::ones(&[batch, taps, out_hw.0, out_hw.1])?,
        })
    }
}

/// Deformable convolution with the weights of `spec` and sampling field `field`.
pub fn deform_conv2d<T: Scalar>(x: &Tensor<T>, spec: &ConvSpec<T>, field: &DeformField<T>) -> Result<Tensor<T>> {
    forward(
        x,
        &spec.weight,
        spec.bias.as_ref(),
        &field.offsets,
        &field.masks,
        spec.geometry,
    )
}

#[derive(Clone, Copy)]
struct Bilinear<T> {
    idx: [usize; 4],
    valid: [bool; 4],
    wt: [T; 4],
    d_wy: [T; 4],
    d_wx: [T; 4],
}

fn bilinear<T: Scalar>(py: T, px: T, h: usize, w: usize) -> Bilinear<T> {
    let y0 = py.floor();
    let x0 = px.floor();
    let ly = py - y0;
    let lx = px - x0;
    let one = T::one();
    let (y0, x0) = (y0.as_f64() as i64, x0.as_f64() as i64);
    let corners = [(y0, x0), (y0, x0 + 1), (y0 + 1, x0), (y0 + 1, x0 + 1)];
    let mut idx = [0usize; 4];
    let mut valid = [false; 4];
    for (c, &(yy, xx)) in corners.iter().enumerate() {
        if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
            idx[c] = yy as usize * w + xx as usize;
            valid[c] = true;
        }
    }
    Bilinear {
        idx,
        valid,
        wt: [(one - ly) * (one - lx), (one - ly) * lx, ly * (one - lx), ly * lx],
        d_wy: [-(one - lx), -lx, one - lx, lx],
        d_wx: [-(one - ly), one - ly, -ly, ly],
    }
}

impl<T: Scalar> Bilinear<T> {
    fn sample(&self, plane: &[T]) -> T {
        let mut v = T::zero();
        for c in 0..4 {
            if self.valid[c] {
                v += self.wt[c] * plane[self.idx[c]];
            }
        }
        v
    }
}

struct Dims {
    n: usize,
    ci: usize,
    co: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
}

fn check<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    offsets: &Tensor<T>,
    masks: &Tensor<T>,
    geo: Conv2dGeometry,
) -> Result<Dims> {
    let [n, co, oh, ow] = output_shape(x, weight, bias, geo)?;
    let (_, ci, h, w) = x.dims4("deform_conv2d")?;
    let (_, _, kh, kw) = weight.dims4("deform_conv2d weight")?;
    let taps = kh * kw;
    if offsets.shape() != [n, 2 * taps, oh, ow] {
        return Err(Error::shape(
            "deform_conv2d",
            format!("offsets {:?}, expected {:?}", offsets.shape(), [n, 2 * taps, oh, ow]),
        ));
    }
    if masks.shape() != [n, taps, oh, ow] {
        return Err(Error::shape(
            "deform_conv2d",
            format!("masks {:?}, expected {:?}", masks.shape(), [n, taps, oh, ow]),
        ));
    }
    if !offsets.all_finite() {
        return Err(Error::NonFinite {
            what: "deform_conv2d offsets".into(),
        });
    }
    Ok(Dims {
        n,
        ci,
        co,
        h,
        w,
        kh,
        kw,
        oh,
        ow,
    })
}

fn sample_point<T: Scalar>(d: &Dims, geo: Conv2dGeometry, offs: &[T], k: usize, pos: usize) -> Bilinear<T> {
    let hw = d.oh * d.ow;
    let (oy, ox) = (pos / d.ow, pos % d.ow);
    let (ky, kx) = (k / d.kw, k % d.kw);
    let base_y = (oy * geo.stride + ky) as f64 - geo.padding as f64;
    let base_x = (ox * geo.stride + kx) as f64 - geo.padding as f64;
    let py = T::lit(base_y) + offs[2 * k * hw + pos];
    let px = T::lit(base_x) + offs[(2 * k + 1) * hw + pos];
    bilinear(py, px, d.h, d.w)
}

/// Modulated samples `Δm_k · x(p + p_k + Δp_k)` laid out `Ci × N × (H_out·W_out)`.
fn columns<T: Scalar>(d: &Dims, geo: Conv2dGeometry, xb: &[T], offs: &[T], mask: &[T]) -> Vec<T> {
    let hw = d.oh * d.ow;
    let taps = d.kh * d.kw;
    let mut col = vec![T::zero(); d.ci * taps * hw];
    for k in 0..taps {
        for pos in 0..hw {
            let bl = sample_point(d, geo, offs, k, pos);
            let m = mask[k * hw + pos];
            for i in 0..d.ci {
                let plane = &xb[i * d.h * d.w..(i + 1) * d.h * d.w];
                col[(i * taps + k) * hw + pos] = m * bl.sample(plane);
            }
        }
    }
    col
}

pub fn forward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    offsets: &Tensor<T>,
    masks: &Tensor<T>,
    geo: Conv2dGeometry,
) -> Result<Tensor<T>> {
    let d = check(x, weight, bias, offsets, masks, geo)?;
    let hw = d.oh * d.ow;
    let taps = d.kh * d.kw;
    let wdat = weight.data();
    let mut out = vec![T::zero(); d.n * d.co * hw];
    for b in 0..d.n {
        let xb = &x.data()[b * d.ci * d.h * d.w..(b + 1) * d.ci * d.h * d.w];
        let offs = &offsets.data()[b * 2 * taps * hw..(b + 1) * 2 * taps * hw];
        let mask = &masks.data()[b * taps * hw..(b + 1) * taps * hw];
        let col = columns(&d, geo, xb, offs, mask);
        for o in 0..d.co {
            let y = &mut out[(b * d.co + o) * hw..(b * d.co + o + 1) * hw];
            if let Some(bias) = bias {
                y.iter_mut().for_each(|v| *v = bias.data()[o]);
            }
            for ik in 0..d.ci * taps {
                let wv = wdat[o * d.ci * taps + ik];
                let c = &col[ik * hw..(ik + 1) * hw];
                for (yv, &cv) in y.iter_mut().zip(c) {
                    *yv += wv * cv;
                }
            }
        }
    }
    Tensor::new(&[d.n, d.co, d.oh, d.ow], out)
}

pub struct DeformGrads<T> {
    pub input: Vec<T>,
    pub weight: Vec<T>,
    pub bias: Option<Vec<T>>,
    pub offsets: Vec<T>,
    pub masks: Vec<T>,
}

pub fn backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    has_bias: bool,
    offsets: &Tensor<T>,
    masks: &Tensor<T>,
    geo: Conv2dGeometry,
    g: &[T],
) -> DeformGrads<T> {
    let d = check(x, weight, None, offsets, masks, geo).expect("validated in forward");
    let hw = d.oh * d.ow;
    let taps = d.kh * d.kw;
    let wdat = weight.data();
    let mut gx = vec![T::zero(); x.numel()];
    let mut gw = vec![T::zero(); weight.numel()];
    let mut gb = has_bias.then(|| vec![T::zero(); d.co]);
    let mut goff = vec![T::zero(); offsets.numel()];
    let mut gmask = vec![T::zero(); masks.numel()];
    for b in 0..d.n {
        let plane_len = d.h * d.w;
        let xb = &x.data()[b * d.ci * plane_len..(b + 1) * d.ci * plane_len];
        let offs = &offsets.data()[b * 2 * taps * hw..(b + 1) * 2 * taps * hw];
        let mask = &masks.data()[b * taps * hw..(b + 1) * taps * hw];
        let gout = &g[b * d.co * hw..(b + 1) * d.co * hw];
        let col = columns(&d, geo, xb, offs, mask);

        let mut gcol = vec![T::zero(); d.ci * taps * hw];
        for o in 0..d.co {
            let go = &gout[o * hw..(o + 1) * hw];
            if let Some(gb) = &mut gb {
                gb[o] += go.iter().copied().sum();
            }
            for ik in 0..d.ci * taps {
                let widx = o * d.ci * taps + ik;
                let wv = wdat[widx];
                let c = &col[ik * hw..(ik + 1) * hw];
                let gc = &mut gcol[ik * hw..(ik + 1) * hw];
                let mut acc = T::zero();
                for pos in 0..hw {
                    acc += go[pos] * c[pos];
                    gc[pos] += go[pos] * wv;
                }
                gw[widx] += acc;
            }
        }

        let gxb = &mut gx[b * d.ci * plane_len..(b + 1) * d.ci * plane_len];
        let goffb = &mut goff[b * 2 * taps * hw..(b + 1) * 2 * taps * hw];
        let gmaskb = &mut gmask[b * taps * hw..(b + 1) * taps * hw];
        for k in 0..taps {
            for pos in 0..hw {
                let bl = sample_point(&d, geo, offs, k, pos);
                let m = mask[k * hw + pos];
                let (mut g_m, mut g_y, mut g_x) = (T::zero(), T::zero(), T::zero());
                for i in 0..d.ci {
                    let gc = gcol[(i * taps + k) * hw + pos];
                    let plane = &xb[i * plane_len..(i + 1) * plane_len];
                    let gplane = &mut gxb[i * plane_len..(i + 1) * plane_len];
                    let mut samp = T::zero();
                    let mut dy = T::zero();
                    let mut dx = T::zero();
                    for c in 0..4 {
                        if bl.valid[c] {
                            let v = plane[bl.idx[c]];
                            samp += bl.wt[c] * v;
                            dy += bl.d_wy[c] * v;
                            dx += bl.d_wx[c] * v;
                            gplane[bl.idx[c]] += gc * m * bl.wt[c];
                        }
                    }
                    g_m += gc * samp;
                    g_y += gc * m * dy;
                    g_x += gc * m * dx;
                }
                gmaskb[k * hw + pos] += g_m;
                goffb[2 * k * hw + pos] += g_y;
                goffb[(2 * k + 1) * hw + pos] += g_x;
            }
        }
    }
    DeformGrads {
        input: gx,
        weight: gw,
        bias: gb,
        offsets: goff,
        masks: gmask,
    }
}
