use super::valid_range;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Stride and symmetric zero padding of a 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dGeometry {
    pub stride: usize,
    pub padding: usize,
}

impl Conv2dGeometry {
    /// Stride 1 with `padding = k / 2`, preserving spatial extent for odd `k`.
    pub fn same(kernel: usize) -> Self {
        Self {
            stride: 1,
            padding: kernel / 2,
        }
    }

    pub fn output_extent(&self, input: usize, kernel: usize) -> Option<usize> {
        let padded = input + 2 * self.padding;
        if self.stride == 0 || padded < kernel {
            return None;
        }
        Some((padded - kernel) / self.stride + 1)
    }
}

/// The fixed sampling offsets `(dy, dx)` of a `k_h × k_w` kernel centred on
/// the output position, in row-major order.
pub fn kernel_offsets(kernel_hw: (usize, usize)) -> Vec<(isize, isize)> {
    let (kh, kw) = kernel_hw;
    let (ch, cw) = ((kh / 2) as isize, (kw / 2) as isize);
    (0..kh as isize)
        .flat_map(|y| (0..kw as isize).map(move |x| (y - ch, x - cw)))
        .collect()
}

/// A convolution layer's hyper-parameters together with its weights.
#[derive(Debug, Clone)]
pub struct ConvSpec<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_hw: (usize, usize),
    pub geometry: Conv2dGeometry,
    /// `out × in × k_h × k_w`.
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

impl<T: Scalar> ConvSpec<T> {
    pub fn new(weight: Tensor<T>, bias: Option<Tensor<T>>, geometry: Conv2dGeometry) -> Result<Self> {
        let (out_channels, in_channels, kh, kw) = weight.dims4("conv weight")?;
        if let Some(b) = &bias {
            if b.shape() != [out_channels] {
                return Err(Error::shape(
                    "conv bias",
                    format!("expected [{out_channels}], got {:?}", b.shape()),
                ));
            }
        }
        if geometry.stride == 0 {
            return Err(Error::invalid("conv2d", "stride must be positive"));
        }
        Ok(Self {
            in_channels,
            out_channels,
            kernel_hw: (kh, kw),
            geometry,
            weight,
            bias,
        })
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        Some((
            self.geometry.output_extent(h, self.kernel_hw.0)?,
            self.geometry.output_extent(w, self.kernel_hw.1)?,
        ))
    }
}

/// Vanilla 2-D convolution with the weights of `spec`.
pub fn conv2d<T: Scalar>(x: &Tensor<T>, spec: &ConvSpec<T>) -> Result<Tensor<T>> {
    forward(x, &spec.weight, spec.bias.as_ref(), spec.geometry)
}

pub(crate) fn output_shape<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    geo: Conv2dGeometry,
) -> Result<[usize; 4]> {
    let (n, c, h, wd) = x.dims4("conv2d")?;
    let (co, ci, kh, kw) = w.dims4("conv2d weight")?;
    if c != ci {
        return Err(Error::shape(
            "conv2d",
            format!("input has {c} channels, weights expect {ci}"),
        ));
    }
    if let Some(b) = bias {
        if b.shape() != [co] {
            return Err(Error::shape("conv2d", format!("bias {:?} for {co} outputs", b.shape())));
        }
    }
    match (geo.output_extent(h, kh), geo.output_extent(wd, kw)) {
        (Some(oh), Some(ow)) => Ok([n, co, oh, ow]),
        _ => Err(Error::shape(
            "conv2d",
            format!("{h}x{wd} input with padding {} is smaller than the {kh}x{kw} kernel", geo.padding),
        )),
    }
}

pub fn forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    geo: Conv2dGeometry,
) -> Result<Tensor<T>> {
    let [n, co, oh, ow] = output_shape(x, w, bias, geo)?;
    let (_, ci, h, wd) = x.dims4("conv2d")?;
    let (_, _, kh, kw) = w.dims4("conv2d weight")?;
    let (xd, wdat) = (x.data(), w.data());
    let (s, p) = (geo.stride, geo.padding as isize);
    let mut out = vec![T::zero(); n * co * oh * ow];
    for b in 0..n {
        for o in 0..co {
            let y = &mut out[(b * co + o) * oh * ow..(b * co + o + 1) * oh * ow];
            if let Some(bias) = bias {
                y.iter_mut().for_each(|v| *v = bias.data()[o]);
            }
            for i in 0..ci {
                let xin = &xd[(b * ci + i) * h * wd..(b * ci + i + 1) * h * wd];
                for ky in 0..kh {
                    let rows = valid_range(oh, h, s, ky as isize - p);
                    for kx in 0..kw {
                        let wv = wdat[((o * ci + i) * kh + ky) * kw + kx];
                        let cols = valid_range(ow, wd, s, kx as isize - p);
                        for oy in rows.clone() {
                            let iy = (oy * s) as isize + ky as isize - p;
                            let row_in = &xin[iy as usize * wd..];
                            let row_out = &mut y[oy * ow..(oy + 1) * ow];
                            let base = kx as isize - p;
                            for ox in cols.clone() {
                                row_out[ox] += wv * row_in[((ox * s) as isize + base) as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[n, co, oh, ow], out)
}

pub struct ConvGrads<T> {
    pub input: Vec<T>,
    pub weight: Vec<T>,
    pub bias: Option<Vec<T>>,
}

pub fn backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    has_bias: bool,
    geo: Conv2dGeometry,
    g: &[T],
) -> ConvGrads<T> {
    let (n, ci, h, wd) = x.dims4("conv2d").expect("validated in forward");
    let (co, _, kh, kw) = w.dims4("conv2d weight").expect("validated in forward");
    let oh = geo.output_extent(h, kh).unwrap();
    let ow = geo.output_extent(wd, kw).unwrap();
    let (xd, wdat) = (x.data(), w.data());
    let (s, p) = (geo.stride, geo.padding as isize);
    let mut gx = vec![T::zero(); xd.len()];
    let mut gw = vec![T::zero(); wdat.len()];
    let mut gb = has_bias.then(|| vec![T::zero(); co]);
    for b in 0..n {
        for o in 0..co {
            let go = &g[(b * co + o) * oh * ow..(b * co + o + 1) * oh * ow];
            if let Some(gb) = &mut gb {
                gb[o] += go.iter().copied().sum();
            }
            for i in 0..ci {
                let plane = (b * ci + i) * h * wd;
                for ky in 0..kh {
                    let rows = valid_range(oh, h, s, ky as isize - p);
                    for kx in 0..kw {
                        let widx = ((o * ci + i) * kh + ky) * kw + kx;
                        let wv = wdat[widx];
                        let cols = valid_range(ow, wd, s, kx as isize - p);
                        let base = kx as isize - p;
                        let mut acc = T::zero();
                        for oy in rows.clone() {
                            let iy = (oy * s) as isize + ky as isize - p;
                            let row = plane + iy as usize * wd;
                            let grow = &go[oy * ow..(oy + 1) * ow];
                            for ox in cols.clone() {
                                let ix = row + ((ox * s) as isize + base) as usize;
                                acc += grow[ox] * xd[ix];
                                gx[ix] += grow[ox] * wv;
                            }
                        }
                        gw[widx] += acc;
                    }
                }
            }
        }
    }
    ConvGrads {
        input: gx,
        weight: gw,
        bias: gb,
    }
}
