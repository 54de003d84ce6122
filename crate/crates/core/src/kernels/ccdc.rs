//! Cross central difference convolution restricted to the horizontal and
//! vertical cross.
//!
//! `y(p) = θ Σ_k w_k (x(p+p_k) − x(p)) + (1−θ) Σ_k w_k x(p+p_k)` over the five
//! cross taps. Taps that fall outside the map are dropped from both sums, so
//! `θ = 0` is a zero-padded cross convolution and a constant map is
//! annihilated everywhere at `θ = 1`, borders included.

use super::valid_range;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// `(dy, dx)` of the five cross taps, in weight order.
pub const CROSS_TAPS: [(isize, isize); 5] = [(-1, 0), (0, -1), (0, 0), (0, 1), (1, 0)];

#[derive(Debug, Clone)]
pub struct CcdcSpec<T> {
    pub theta: T,
    /// `out × in × 5`, one weight per cross tap. The corner taps of the 3×3
    /// grid have no storage.
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

impl<T: Scalar> CcdcSpec<T> {
    pub fn new(weight: Tensor<T>, bias: Option<Tensor<T>>, theta: T) -> Result<Self> {
        check_weight(&weight)?;
        check_theta(theta)?;
        Ok(Self { theta, weight, bias })
    }
}

pub fn check_theta<T: Scalar>(theta: T) -> Result<()> {
    if !(theta >= T::zero() && theta <= T::one()) {
        return Err(Error::invalid("ccdc_hv", format!("theta {theta} outside [0, 1]")));
    }
    Ok(())
}

fn check_weight<T: Scalar>(weight: &Tensor<T>) -> Result<(usize, usize)> {
    match *weight.shape() {
        [co, ci, 5] => Ok((co, ci)),
        _ => Err(Error::shape(
            "ccdc_hv",
            format!("cross weights must be out x in x 5, got {:?}", weight.shape()),
        )),
    }
}

pub fn ccdc_hv<T: Scalar>(x: &Tensor<T>, spec: &CcdcSpec<T>) -> Result<Tensor<T>> {
    forward(x, &spec.weight, spec.bias.as_ref(), spec.theta)
}

pub fn forward<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, bias: Option<&Tensor<T>>, theta: T) -> Result<Tensor<T>> {
    check_theta(theta)?;
    let (co, ci) = check_weight(weight)?;
    let (n, c, h, w) = x.dims4("ccdc_hv")?;
    if c != ci {
        return Err(Error::shape(
            "ccdc_hv",
            format!("input has {c} channels, weights expect {ci}"),
        ));
    }
    if let Some(b) = bias {
        if b.shape() != [co] {
            return Err(Error::shape("ccdc_hv", format!("bias {:?} for {co} outputs", b.shape())));
        }
    }
    let hw = h * w;
    let (xd, wd) = (x.data(), weight.data());
    let mut out = vec![T::zero(); n * co * hw];
    for b in 0..n {
        for o in 0..co {
            let y = &mut out[(b * co + o) * hw..(b * co + o + 1) * hw];
            if let Some(bias) = bias {
                y.iter_mut().for_each(|v| *v = bias.data()[o]);
            }
            for i in 0..ci {
                let plane = &xd[(b * ci + i) * hw..(b * ci + i + 1) * hw];
                for (k, &(dy, dx)) in CROSS_TAPS.iter().enumerate() {
                    let wv = wd[(o * ci + i) * 5 + k];
                    for oy in valid_range(h, h, 1, dy) {
                        let iy = (oy as isize + dy) as usize;
                        for ox in valid_range(w, w, 1, dx) {
                            let ix = (ox as isize + dx) as usize;
                            y[oy * w + ox] += wv * (plane[iy * w + ix] - theta * plane[oy * w + ox]);
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[n, co, h, w], out)
}

pub struct CcdcGrads<T> {
    pub input: Vec<T>,
    pub weight: Vec<T>,
    pub bias: Option<Vec<T>>,
}

pub fn backward<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, has_bias: bool, theta: T, g: &[T]) -> CcdcGrads<T> {
    let (co, ci) = check_weight(weight).expect("validated in forward");
    let (n, _, h, w) = x.dims4("ccdc_hv").expect("validated in forward");
    let hw = h * w;
    let (xd, wd) = (x.data(), weight.data());
    let mut gx = vec![T::zero(); xd.len()];
    let mut gw = vec![T::zero(); wd.len()];
    let mut gb = has_bias.then(|| vec![T::zero(); co]);
    for b in 0..n {
        for o in 0..co {
            let go = &g[(b * co + o) * hw..(b * co + o + 1) * hw];
            if let Some(gb) = &mut gb {
                gb[o] += go.iter().copied().sum();
            }
            for i in 0..ci {
                let base = (b * ci + i) * hw;
                for (k, &(dy, dx)) in CROSS_TAPS.iter().enumerate() {
                    let widx = (o * ci + i) * 5 + k;
                    let wv = wd[widx];
                    let mut acc = T::zero();
                    for oy in valid_range(h, h, 1, dy) {
                        let iy = (oy as isize + dy) as usize;
                        for ox in valid_range(w, w, 1, dx) {
                            let ix = (ox as isize + dx) as usize;
                            let gv = go[oy * w + ox];
                            let (q, p) = (base + iy * w + ix, base + oy * w + ox);
                            acc += gv * (xd[q] - theta * xd[p]);
                            gx[q] += gv * wv;
                            gx[p] -= gv * wv * theta;
                        }
                    }
                    gw[widx] += acc;
                }
            }
        }
    }
    CcdcGrads {
        input: gx,
        weight: gw,
        bias: gb,
    }
}
