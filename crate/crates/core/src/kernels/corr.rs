//! Channel-preserving correlation of query features against support
//! features used as kernels, in 2-D and in the depth-stacked dual form.
//!
//! The dual form stacks the deformation and gradient branch outputs along a
//! depth axis of extent 2 and correlates with a kernel of depth 2 without
//! depth padding, so the single output slice is the sum of the two per-branch
//! correlations.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Which feature-augmentation branch a depth slice comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Deformation,
    Gradient,
}

/// Depth-stacked query features and the matching stacked support kernel.
#[derive(Debug, Clone)]
pub struct DualStack<T> {
    /// `B × C × 2 × H × W`.
    pub query: Tensor<T>,
    /// `B × C × 2 × k × k`.
    pub kernel: Tensor<T>,
    pub order: [Branch; 2],
}

impl<T: Scalar> DualStack<T> {
    /// Stacks `(branch, tensor)` pairs. Query and kernel must list the
    /// branches in the same depth order.
    pub fn new(query: [(Branch, &Tensor<T>); 2], kernel: [(Branch, &Tensor<T>); 2]) -> Result<Self> {
        let qo = [query[0].0, query[1].0];
        let ko = [kernel[0].0, kernel[1].0];
        if qo != ko {
            return Err(Error::invalid(
                "conv3d_dual",
                format!("query depth order {qo:?} differs from kernel depth order {ko:?}"),
            ));
        }
        if qo[0] == qo[1] {
            return Err(Error::invalid("conv3d_dual", "both depth slices come from the same branch"));
        }
        let (qc, kc) = (query[0].1.shape().get(1), kernel[0].1.shape().get(1));
        if qc != kc {
            return Err(Error::shape(
                "conv3d_dual",
                format!("query has {qc:?} channels, kernel {kc:?}"),
            ));
        }
        Ok(Self {
            query: stack_depth(&[query[0].1, query[1].1])?,
            kernel: stack_depth(&[kernel[0].1, kernel[1].1])?,
            order: qo,
        })
    }
}

/// Stacks 4-D `B × C × H × W` tensors into `B × C × D × H × W`.
pub fn stack_depth<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::invalid("stack_depth", "no inputs"))?;
    let (n, c, h, w) = first.dims4("stack_depth")?;
    for p in parts {
        if p.shape() != first.shape() {
            return Err(Error::shape(
                "stack_depth",
                format!("cannot stack {:?} with {:?}", p.shape(), first.shape()),
            ));
        }
    }
    let d = parts.len();
    let hw = h * w;
    let mut out = Vec::with_capacity(n * c * d * hw);
    for plane in 0..n * c {
        for p in parts {
            out.extend_from_slice(&p.data()[plane * hw..(plane + 1) * hw]);
        }
    }
    Tensor::new(&[n, c, d, h, w], out)
}

pub fn stack_depth_backward<T: Scalar>(part_shape: &[usize], depth: usize, g: &[T]) -> Vec<Vec<T>> {
    let planes = part_shape[0] * part_shape[1];
    let hw = part_shape[2] * part_shape[3];
    let mut grads: Vec<Vec<T>> = (0..depth).map(|_| Vec::with_capacity(planes * hw)).collect();
    for plane in 0..planes {
        for (d, gd) in grads.iter_mut().enumerate() {
            let start = (plane * depth + d) * hw;
            gd.extend_from_slice(&g[start..start + hw]);
        }
    }
    grads
}

struct Dims {
    planes: usize,
    d: usize,
    dk: usize,
    od: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
}

fn dims5<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>) -> Result<Dims> {
    let (&[n, c, d, h, w], &[kn, kc, dk, kh, kw]) = (q.shape(), k.shape()) else {
        return Err(Error::shape(
            "depthwise_corr3d",
            format!("expected 5-D query and kernel, got {:?} and {:?}", q.shape(), k.shape()),
        ));
    };
    if n != kn || c != kc {
        return Err(Error::shape(
            "depthwise_corr3d",
            format!("query {:?} and kernel {:?} disagree on batch or channels", q.shape(), k.shape()),
        ));
    }
    if dk > d || kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::shape(
            "depthwise_corr3d",
            format!("kernel {:?} must have odd spatial extent and depth at most {d}", k.shape()),
        ));
    }
    Ok(Dims {
        planes: n * c,
        d,
        dk,
        od: d - dk + 1,
        h,
        w,
        kh,
        kw,
    })
}

/// Per-channel 3-D correlation: no padding along depth, `k/2` zero padding
/// spatially. Output is `B × C × (D − D_k + 1) × H × W`.
pub fn depthwise_corr3d<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>) -> Result<Tensor<T>> {
    let dm = dims5(q, k)?;
    let hw = dm.h * dm.w;
    let (ph, pw) = ((dm.kh / 2) as isize, (dm.kw / 2) as isize);
    let ksz = dm.kh * dm.kw;
    let (qd, kd) = (q.data(), k.data());
    let mut out = vec![T::zero(); dm.planes * dm.od * hw];
    for plane in 0..dm.planes {
        for z in 0..dm.od {
            let y = &mut out[(plane * dm.od + z) * hw..(plane * dm.od + z + 1) * hw];
            for dz in 0..dm.dk {
                let src = &qd[(plane * dm.d + z + dz) * hw..(plane * dm.d + z + dz + 1) * hw];
                let ker = &kd[(plane * dm.dk + dz) * ksz..(plane * dm.dk + dz + 1) * ksz];
                for ky in 0..dm.kh {
                    let dy = ky as isize - ph;
                    for kx in 0..dm.kw {
                        let dx = kx as isize - pw;
                        let wv = ker[ky * dm.kw + kx];
                        for oy in super::valid_range(dm.h, dm.h, 1, dy) {
                            let iy = (oy as isize + dy) as usize;
                            let cols = super::valid_range(dm.w, dm.w, 1, dx);
                            for ox in cols {
                                y[oy * dm.w + ox] += wv * src[iy * dm.w + (ox as isize + dx) as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    let s = q.shape();
    Tensor::new(&[s[0], s[1], dm.od, dm.h, dm.w], out)
}

pub fn depthwise_corr3d_backward<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, g: &[T]) -> (Vec<T>, Vec<T>) {
    let dm = dims5(q, k).expect("validated in forward");
    let hw = dm.h * dm.w;
    let (ph, pw) = ((dm.kh / 2) as isize, (dm.kw / 2) as isize);
    let ksz = dm.kh * dm.kw;
    let (qd, kd) = (q.data(), k.data());
    let mut gq = vec![T::zero(); qd.len()];
    let mut gk = vec![T::zero(); kd.len()];
    for plane in 0..dm.planes {
        for z in 0..dm.od {
            let go = &g[(plane * dm.od + z) * hw..(plane * dm.od + z + 1) * hw];
            for dz in 0..dm.dk {
                let qoff = (plane * dm.d + z + dz) * hw;
                let koff = (plane * dm.dk + dz) * ksz;
                for ky in 0..dm.kh {
                    let dy = ky as isize - ph;
                    for kx in 0..dm.kw {
                        let dx = kx as isize - pw;
                        let kidx = koff + ky * dm.kw + kx;
                        let wv = kd[kidx];
                        let mut acc = T::zero();
                        for oy in super::valid_range(dm.h, dm.h, 1, dy) {
                            let iy = (oy as isize + dy) as usize;
                            for ox in super::valid_range(dm.w, dm.w, 1, dx) {
                                let qi = qoff + iy * dm.w + (ox as isize + dx) as usize;
                                let gv = go[oy * dm.w + ox];
                                acc += gv * qd[qi];
                                gq[qi] += gv * wv;
                            }
                        }
                        gk[kidx] += acc;
                    }
                }
            }
        }
    }
    (gq, gk)
}

/// Channel `c` of the output is the zero-padded 2-D correlation of query
/// channel `c` with kernel channel `c`; spatial extent is preserved.
pub fn corr2d_depthwise<T: Scalar>(query: &Tensor<T>, kernel: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = query.dims4("corr2d_depthwise")?;
    let (kn, kc, kh, kw) = kernel.dims4("corr2d_depthwise kernel")?;
    if kc != c || kn != n {
        return Err(Error::shape(
            "corr2d_depthwise",
            format!("query {:?} vs kernel {:?}", query.shape(), kernel.shape()),
        ));
    }
    let q5 = query.clone().reshape(&[n, c, 1, h, w])?;
    let k5 = kernel.clone().reshape(&[kn, kc, 1, kh, kw])?;
    depthwise_corr3d(&q5, &k5)?.reshape(&[n, c, h, w])
}

/// Correlates the stacked query with the stacked support kernel over
/// height, width and depth, returning the `B × C × H × W` similarity map.
pub fn conv3d_dual<T: Scalar>(stack: &DualStack<T>) -> Result<Tensor<T>> {
    let y = depthwise_corr3d(&stack.query, &stack.kernel)?;
    let s = y.shape().to_vec();
    y.reshape(&[s[0], s[1], s[3], s[4]])
}
