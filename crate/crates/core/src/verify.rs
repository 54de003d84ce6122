//! Self-check suites: kernels against nested-loop reference implementations,
//! degenerate reductions, finite-difference gradients, file roundtrips and
//! matching against exhaustive search.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::kernels::{ccdc, conv2d, corr, deform, Conv2dGeometry, CROSS_TAPS};
use crate::locmap::{decode_peaks, encode_location_map, from_pgm16, to_pgm16, DecoderConfig, GtEncoder, LocationMap};
use crate::metrics::{match_points, Point};
use crate::model::{checkpoint, BBox, Fsol, ModelConfig};
use crate::tensor::ops::Window;
use crate::tensor::{GradTape, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteResult {
    pub name: String,
    pub checks: usize,
    pub max_error: f64,
    pub tolerance: f64,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.max_error <= self.tolerance
    }
}

#[derive(Debug, Clone, Default)]
pub struct VerifyReport {
    pub suites: Vec<SuiteResult>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.suites.iter().all(SuiteResult::passed)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for r in &self.suites {
            writeln!(
                s,
                "{:<4} {:<28} checks {:>5}  max error {:.3e}  tolerance {:.0e}",
                if r.passed() { "ok" } else { "FAIL" },
                r.name,
                r.checks,
                r.max_error,
                r.tolerance
            )
            .unwrap();
        }
        let failed = self.suites.iter().filter(|r| !r.passed()).count();
        writeln!(s, "{} suites, {failed} failed", self.suites.len()).unwrap();
        s
    }
}

/// Nested-loop reference implementations, written directly from the
/// operator definitions with explicit bounds checks.
pub mod reference {
    use super::*;

    fn at(x: &Tensor<f64>, b: usize, c: usize, y: isize, xx: isize) -> f64 {
        let s = x.shape();
        if y < 0 || xx < 0 || y >= s[2] as isize || xx >= s[3] as isize {
            0.0
        } else {
            x.get(&[b, c, y as usize, xx as usize])
        }
    }

    pub fn conv2d(x: &Tensor<f64>, w: &Tensor<f64>, bias: Option<&Tensor<f64>>, stride: usize, pad: usize) -> Tensor<f64> {
        let (n, ci, h, wd) = x.dims4("ref").unwrap();
        let (co, _, kh, kw) = w.dims4("ref").unwrap();
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        Tensor::from_fn(&[n, co, oh, ow], |i| {
            let (b, o, oy, ox) = (i[0], i[1], i[2], i[3]);
            let mut acc = bias.map_or(0.0, |b| b.data()[o]);
            for c in 0..ci {
                for ky in 0..kh {
                    for kx in 0..kw {
                        let y = (oy * stride + ky) as isize - pad as isize;
                        let xx = (ox * stride + kx) as isize - pad as isize;
                        acc += w.get(&[o, c, ky, kx]) * at(x, b, c, y, xx);
                    }
                }
            }
            acc
        })
        .unwrap()
    }

    fn sample(x: &Tensor<f64>, b: usize, c: usize, py: f64, px: f64) -> f64 {
        let (y0, x0) = (py.floor(), px.floor());
        let (ly, lx) = (py - y0, px - x0);
        let (y0, x0) = (y0 as isize, x0 as isize);
        at(x, b, c, y0, x0) * (1.0 - ly) * (1.0 - lx)
            + at(x, b, c, y0, x0 + 1) * (1.0 - ly) * lx
            + at(x, b, c, y0 + 1, x0) * ly * (1.0 - lx)
            + at(x, b, c, y0 + 1, x0 + 1) * ly * lx
    }

    #[allow(clippy::too_many_arguments)]
    pub fn deform(
        x: &Tensor<f64>,
        w: &Tensor<f64>,
        bias: Option<&Tensor<f64>>,
        offsets: &Tensor<f64>,
        masks: &Tensor<f64>,
        stride: usize,
        pad: usize,
    ) -> Tensor<f64> {
        let (n, ci, h, wd) = x.dims4("ref").unwrap();
        let (co, _, kh, kw) = w.dims4("ref").unwrap();
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        Tensor::from_fn(&[n, co, oh, ow], |i| {
            let (b, o, oy, ox) = (i[0], i[1], i[2], i[3]);
            let mut acc = bias.map_or(0.0, |b| b.data()[o]);
            for ky in 0..kh {
                for kx in 0..kw {
                    let k = ky * kw + kx;
                    let py = (oy * stride + ky) as f64 - pad as f64 + offsets.get(&[b, 2 * k, oy, ox]);
                    let px = (ox * stride + kx) as f64 - pad as f64 + offsets.get(&[b, 2 * k + 1, oy, ox]);
                    let m = masks.get(&[b, k, oy, ox]);
                    for c in 0..ci {
                        acc += w.get(&[o, c, ky, kx]) * m * sample(x, b, c, py, px);
                    }
                }
            }
            acc
        })
        .unwrap()
    }

    pub fn ccdc(x: &Tensor<f64>, w: &Tensor<f64>, bias: Option<&Tensor<f64>>, theta: f64) -> Tensor<f64> {
        let (n, ci, h, wd) = x.dims4("ref").unwrap();
        let co = w.shape()[0];
        Tensor::from_fn(&[n, co, h, wd], |i| {
            let (b, o, y, xx) = (i[0], i[1], i[2] as isize, i[3] as isize);
            let mut diff = 0.0;
            let mut plain = 0.0;
            for c in 0..ci {
                let centre = at(x, b, c, y, xx);
                for (k, (dy, dx)) in CROSS_TAPS.iter().enumerate() {
                    let (ty, tx) = (y + dy, xx + dx);
                    if ty < 0 || tx < 0 || ty >= h as isize || tx >= wd as isize {
                        continue;
                    }
                    let wk = w.get(&[o, c, k]);
                    diff += wk * (at(x, b, c, ty, tx) - centre);
                    plain += wk * at(x, b, c, ty, tx);
                }
            }
            theta * diff + (1.0 - theta) * plain + bias.map_or(0.0, |b| b.data()[o])
        })
        .unwrap()
    }

    /// Same-size zero-padded per-channel correlation.
    pub fn corr2d(q: &Tensor<f64>, k: &Tensor<f64>) -> Tensor<f64> {
        let (_, _, kh, kw) = k.dims4("ref").unwrap();
        Tensor::from_fn(q.shape(), |i| {
            let (b, c, y, xx) = (i[0], i[1], i[2] as isize, i[3] as isize);
            let mut acc = 0.0;
            for ky in 0..kh {
                for kx in 0..kw {
                    let dy = ky as isize - (kh / 2) as isize;
                    let dx = kx as isize - (kw / 2) as isize;
                    acc += k.get(&[b, c, ky, kx]) * at(q, b, c, y + dy, xx + dx);
                }
            }
            acc
        })
        .unwrap()
    }

    /// Sum of the per-branch correlations.
    pub fn dual(qd: &Tensor<f64>, qc: &Tensor<f64>, kd: &Tensor<f64>, kc: &Tensor<f64>) -> Tensor<f64> {
        let a = corr2d(qd, kd);
        let b = corr2d(qc, kc);
        Tensor::new(a.shape(), a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect()).unwrap()
    }
}

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::rand_uniform(shape, -1.0, 1.0, rng).unwrap()
}

/// Random fractional offsets bounded away from integers, so sampling never
/// sits exactly on a bilinear kink.
fn rand_offsets(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let whole = rng.gen_range(-2i32..=1) as f64;
        whole + rng.gen_range(0.1..0.9)
    })
    .unwrap()
}

fn rand_masks(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::rand_uniform(shape, 0.0, 1.0, rng).unwrap()
}

fn max_err(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    if a.shape() != b.shape() {
        return f64::INFINITY;
    }
    a.max_abs_diff(b)
}

/// Each kernel against its reference on `trials` random instances with at
/// most 4 channels and 8 × 8 inputs.
pub fn kernel_oracles(trials: usize, seed: u64) -> Result<Vec<SuiteResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = [0.0f64; 5];
    for _ in 0..trials {
        let n = rng.gen_range(1..=2);
        let ci = rng.gen_range(1..=4);
        let co = rng.gen_range(1..=4);
        let h = rng.gen_range(3..=8);
        let w = rng.gen_range(3..=8);
        let k = [1, 3][rng.gen_range(0..2)];
        let stride = rng.gen_range(1..=2);
        let pad = rng.gen_range(0..=k / 2);
        let x = rand_t(&mut rng, &[n, ci, h, w]);
        let wt = rand_t(&mut rng, &[co, ci, k, k]);
        let bias = rand_t(&mut rng, &[co]);
        let geo = Conv2dGeometry { stride, padding: pad };

        let got = conv2d::forward(&x, &wt, Some(&bias), geo)?;
        worst[0] = worst[0].max(max_err(&got, &reference::conv2d(&x, &wt, Some(&bias), stride, pad)));

        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (w + 2 * pad - k) / stride + 1;
        let offs = rand_offsets(&mut rng, &[n, 2 * k * k, oh, ow]);
        let masks = rand_masks(&mut rng, &[n, k * k, oh, ow]);
        let got = deform::forward(&x, &wt, Some(&bias), &offs, &masks, geo)?;
        let want = reference::deform(&x, &wt, Some(&bias), &offs, &masks, stride, pad);
        worst[1] = worst[1].max(max_err(&got, &want));

        let theta = rng.gen_range(0.0..=1.0);
        let wc = rand_t(&mut rng, &[co, ci, 5]);
        let got = ccdc::forward(&x, &wc, Some(&bias), theta)?;
        worst[2] = worst[2].max(max_err(&got, &reference::ccdc(&x, &wc, Some(&bias), theta)));

        let kk = [1, 3, 5][rng.gen_range(0..3)];
        let kd = rand_t(&mut rng, &[n, ci, kk, kk]);
        let got = corr::corr2d_depthwise(&x, &kd)?;
        worst[3] = worst[3].max(max_err(&got, &reference::corr2d(&x, &kd)));

        let xc = rand_t(&mut rng, &[n, ci, h, w]);
        let kc = rand_t(&mut rng, &[n, ci, kk, kk]);
        use corr::Branch::*;
        let stack = corr::DualStack::new([(Deformation, &x), (Gradient, &xc)], [(Deformation, &kd), (Gradient, &kc)])?;
        let got = corr::conv3d_dual(&stack)?;
        worst[4] = worst[4].max(max_err(&got, &reference::dual(&x, &xc, &kd, &kc)));
    }
    let names = ["oracle conv2d", "oracle deform_conv2d", "oracle ccdc_hv", "oracle corr2d_depthwise", "oracle conv3d_dual"];
    Ok(names
        .iter()
        .zip(worst)
        .map(|(n, e)| SuiteResult {
            name: n.to_string(),
            checks: trials,
            max_error: e,
            tolerance: 1e-6,
        })
        .collect())
}

/// Exact special cases: identity deformation field, `θ = 0` cross conv,
/// constant input at `θ = 1`, stacked correlation as a branch sum.
pub fn degenerate_reductions(trials: usize, seed: u64) -> Result<Vec<SuiteResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = [0.0f64; 4];
    for _ in 0..trials {
        let (ci, co) = (rng.gen_range(1..=4), rng.gen_range(1..=4));
        let (h, w) = (rng.gen_range(3..=8), rng.gen_range(3..=8));
        let x = rand_t(&mut rng, &[1, ci, h, w]);
        let wt = rand_t(&mut rng, &[co, ci, 3, 3]);
        let geo = Conv2dGeometry::same(3);
        let field = deform::DeformField::identity(1, 9, (h, w))?;
        let a = deform::forward(&x, &wt, None, &field.offsets, &field.masks, geo)?;
        worst[0] = worst[0].max(max_err(&a, &conv2d::forward(&x, &wt, None, geo)?));

        // θ = 0: a 3×3 convolution whose corner weights are zero.
        let wc = rand_t(&mut rng, &[co, ci, 5]);
        let full = Tensor::from_fn(&[co, ci, 3, 3], |i| {
            CROSS_TAPS
                .iter()
                .position(|&(dy, dx)| (dy + 1) as usize == i[2] && (dx + 1) as usize == i[3])
                .map_or(0.0, |k| wc.get(&[i[0], i[1], k]))
        })?;
        let a = ccdc::forward(&x, &wc, None, 0.0)?;
        worst[1] = worst[1].max(max_err(&a, &conv2d::forward(&x, &full, None, geo)?));

        let c = Tensor::full(&[1, ci, h, w], rng.gen_range(-3.0..3.0))?;
        let a = ccdc::forward(&c, &wc, None, 1.0)?;
        worst[2] = worst[2].max(a.data().iter().fold(0.0f64, |m, v| m.max(v.abs())));

        let xc = rand_t(&mut rng, &[1, ci, h, w]);
        let kd = rand_t(&mut rng, &[1, ci, 3, 3]);
        let kc = rand_t(&mut rng, &[1, ci, 3, 3]);
        use corr::Branch::*;
        let stack = corr::DualStack::new([(Deformation, &x), (Gradient, &xc)], [(Deformation, &kd), (Gradient, &kc)])?;
        let dual = corr::conv3d_dual(&stack)?;
        let a = corr::corr2d_depthwise(&x, &kd)?;
        let b = corr::corr2d_depthwise(&xc, &kc)?;
        let sum = Tensor::new(a.shape(), a.data().iter().zip(b.data()).map(|(p, q)| p + q).collect())?;
        worst[3] = worst[3].max(max_err(&dual, &sum));
    }
    let names = [
        "reduce deform->conv2d",
        "reduce ccdc theta=0",
        "reduce ccdc constant theta=1",
        "reduce conv3d_dual sum",
    ];
    Ok(names
        .iter()
        .zip(worst)
        .map(|(n, e)| SuiteResult {
            name: n.to_string(),
            checks: trials,
            max_error: e,
            tolerance: 1e-12,
        })
        .collect())
}

/// Relative error `|a − n| / max(|a|, |n|, 1e-6)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Compares tape gradients of `Σ r ⊙ op(inputs)` (fixed random `r`) with
/// central differences at `samples` random coordinates of every input.
/// Returns the largest relative error.
pub fn check_op_gradient(
    inputs: &[Tensor<f64>],
    op: &dyn Fn(&mut GradTape<f64>, &[Var]) -> Result<Var>,
    samples: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(usize, f64)> {
    let eval = |vals: &[Tensor<f64>], r: Option<&Tensor<f64>>| -> Result<(GradTape<f64>, Vec<Var>, Var, Tensor<f64>)> {
        let mut tape = GradTape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.leaf(t.clone().with_grad())).collect();
        let out = op(&mut tape, &vars)?;
        let out_val = tape.value(out).clone();
        let loss = match r {
            Some(r) => {
                let rv = tape.constant(r.clone());
                let prod = tape.mul(out, rv)?;
                tape.sum(prod)
            }
            None => tape.sum(out),
        };
        Ok((tape, vars, loss, out_val))
    };
    let (_, _, _, out0) = eval(inputs, None)?;
    let r = Tensor::rand_uniform(out0.shape(), -1.0, 1.0, rng)?;
    let (mut tape, vars, loss, _) = eval(inputs, Some(&r))?;
    tape.backward(loss)?;
    let h = 1e-6;
    let mut worst = 0.0f64;
    let mut checks = 0;
    for (i, v) in vars.iter().enumerate() {
        let grad = tape.grad(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[i].numel()]);
        for _ in 0..samples {
            let j = rng.gen_range(0..inputs[i].numel());
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= h;
            let fp = {
                let (t, _, l, _) = eval(&plus, Some(&r))?;
                t.value(l).data()[0]
            };
            let fm = {
                let (t, _, l, _) = eval(&minus, Some(&r))?;
                t.value(l).data()[0]
            };
            worst = worst.max(relative_error(grad[j], (fp - fm) / (2.0 * h)));
            checks += 1;
        }
    }
    Ok((checks, worst))
}

/// Finite-difference checks of every differentiable tape operation.
pub fn op_gradients(samples: usize, seed: u64) -> Result<Vec<SuiteResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    type OpFn = Box<dyn Fn(&mut GradTape<f64>, &[Var]) -> Result<Var>>;
    let geo = Conv2dGeometry { stride: 2, padding: 1 };
    // Inputs away from the leaky ReLU kink.
    let away = |r: &mut ChaCha8Rng, s: &[usize]| {
        Tensor::from_fn(s, |_| {
            let m = r.gen_range(0.1..1.0);
            if r.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .unwrap()
    };
    let cases: Vec<(&str, Vec<Tensor<f64>>, OpFn)> = vec![
        (
            "grad conv2d",
            vec![rand_t(r, &[1, 2, 6, 5]), rand_t(r, &[3, 2, 3, 3]), rand_t(r, &[3])],
            Box::new(move |t, v| t.conv2d(v[0], v[1], Some(v[2]), geo)),
        ),
        (
            "grad deform_conv2d",
            vec![
                rand_t(r, &[1, 2, 5, 5]),
                rand_t(r, &[2, 2, 3, 3]),
                rand_t(r, &[2]),
                rand_offsets(r, &[1, 18, 5, 5]),
                rand_masks(r, &[1, 9, 5, 5]),
            ],
            Box::new(|t, v| t.deform_conv2d(v[0], v[1], Some(v[2]), v[3], v[4], Conv2dGeometry::same(3))),
        ),
        (
            "grad ccdc_hv",
            vec![rand_t(r, &[1, 2, 5, 6]), rand_t(r, &[3, 2, 5]), rand_t(r, &[3])],
            Box::new(|t, v| t.ccdc_hv(v[0], v[1], Some(v[2]), 0.6)),
        ),
        (
            "grad corr2d_depthwise",
            vec![rand_t(r, &[1, 3, 5, 5]), rand_t(r, &[1, 3, 3, 3])],
            Box::new(|t, v| t.corr2d_depthwise(v[0], v[1])),
        ),
        (
            "grad conv3d_dual",
            vec![
                rand_t(r, &[1, 2, 5, 4]),
                rand_t(r, &[1, 2, 5, 4]),
                rand_t(r, &[1, 2, 3, 3]),
                rand_t(r, &[1, 2, 3, 3]),
            ],
            Box::new(|t, v| t.conv3d_dual([v[0], v[1]], [v[2], v[3]])),
        ),
        (
            "grad bilinear_upsample",
            vec![rand_t(r, &[1, 2, 3, 4])],
            Box::new(|t, v| t.bilinear_upsample(v[0], (7, 8))),
        ),
        (
            "grad adaptive_avg_pool",
            vec![rand_t(r, &[1, 2, 7, 5])],
            Box::new(|t, v| t.adaptive_avg_pool(v[0], (3, 3))),
        ),
        (
            "grad crop",
            vec![rand_t(r, &[1, 2, 6, 6])],
            Box::new(|t, v| t.crop(v[0], Window { y0: 1, x0: 2, h: 3, w: 4 })),
        ),
        (
            "grad concat_channels",
            vec![rand_t(r, &[1, 2, 3, 3]), rand_t(r, &[1, 1, 3, 3])],
            Box::new(|t, v| t.concat_channels(&[v[0], v[1]])),
        ),
        (
            "grad cosine_similarity",
            vec![rand_t(r, &[1, 4, 3, 3]), rand_t(r, &[1, 4, 3, 3])],
            Box::new(|t, v| t.cosine_similarity(v[0], v[1], 1e-12)),
        ),
        (
            "grad broadcast add/mul",
            vec![rand_t(r, &[1, 3, 3, 3]), rand_t(r, &[1, 1, 3, 3])],
            Box::new(|t, v| {
                let a = t.add(v[0], v[1])?;
                t.mul(a, v[0])
            }),
        ),
        (
            "grad leaky_relu/sigmoid",
            vec![away(r, &[1, 2, 4, 4])],
            Box::new(|t, v| {
                let a = t.leaky_relu(v[0], 0.01);
                Ok(t.sigmoid(a))
            }),
        ),
        (
            "grad mse_loss",
            vec![rand_t(r, &[1, 1, 4, 4]), rand_t(r, &[1, 1, 4, 4])],
            Box::new(|t, v| t.mse_loss(v[0], v[1])),
        ),
    ];
    let mut out = Vec::new();
    for (name, inputs, op) in cases {
        let (checks, worst) = check_op_gradient(&inputs, op.as_ref(), samples, r)?;
        out.push(SuiteResult {
            name: name.to_string(),
            checks,
            max_error: worst,
            tolerance: 1e-4,
        });
    }
    Ok(out)
}

/// Parameter prefixes sampled by the end-to-end gradient check.
pub const PIPELINE_GROUPS: [&str; 8] = [
    "backbone.stem",
    "backbone.stage",
    "backbone.projection",
    "dfa.dc_offset",
    "dfa.dc.",
    "dfa.ccdc",
    "sq.",
    "head.",
];

/// Finite differences of the desk-scale training loss with respect to
/// `per_group` random parameters in each group of [`PIPELINE_GROUPS`].
pub fn pipeline_gradient(per_group: usize, seed: u64) -> Result<SuiteResult> {
    let mut model = Fsol::<f64>::new(ModelConfig::desk(), seed)?;
    model.jitter(0.05, seed ^ 0xA5A5);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let image = Tensor::rand_uniform(&[1, 3, 64, 64], 0.0, 1.0, &mut rng)?;
    let bbox = BBox::new(13.0, 18.0, 27.0, 29.0);
    let pts = [Point::new(20.0, 23.0), Point::new(45.0, 40.0), Point::new(10.0, 50.0)];
    let gt = encode_location_map(&pts, (64, 64), &GtEncoder::default())?.to_tensor::<f64>();
    let loss_of = |m: &Fsol<f64>| -> Result<(f64, GradTape<f64>, crate::model::Bound, Var)> {
        let mut tape = GradTape::new();
        let bound = m.params().bind(&mut tape);
        let tr = m.forward(&mut tape, &bound, &image, &bbox)?;
        let target = tape.constant(gt.clone());
        let loss = tape.mse_loss(tr.map, target)?;
        Ok((tape.value(loss).data()[0], tape, bound, loss))
    };
    let (_, mut tape, bound, loss) = loss_of(&model)?;
    tape.backward(loss)?;
    let h = 1e-6;
    let mut worst = 0.0f64;
    let mut checks = 0;
    for group in PIPELINE_GROUPS {
        let ids: Vec<_> = model.params().ids().filter(|&id| model.params().name(id).starts_with(group)).collect();
        if ids.is_empty() {
            continue;
        }
        for _ in 0..per_group {
            let id = ids[rng.gen_range(0..ids.len())];
            let j = rng.gen_range(0..model.params().get(id).numel());
            let analytic = tape.grad(bound.var(id)).map_or(0.0, |g| g[j]);
            let orig = model.params().get(id).data()[j];
            model.params_mut().get_mut(id).data_mut()[j] = orig + h;
            let fp = loss_of(&model)?.0;
            model.params_mut().get_mut(id).data_mut()[j] = orig - h;
            let fm = loss_of(&model)?.0;
            model.params_mut().get_mut(id).data_mut()[j] = orig;
            worst = worst.max(relative_error(analytic, (fp - fm) / (2.0 * h)));
            checks += 1;
        }
    }
    Ok(SuiteResult {
        name: "grad end-to-end pipeline".into(),
        checks,
        max_error: worst,
        tolerance: 1e-4,
    })
}

/// PGM, checkpoint and location-map encode/decode roundtrips.
pub fn roundtrips(trials: usize, seed: u64) -> Result<Vec<SuiteResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pgm = 0.0f64;
    let mut locmap = 0.0f64;
    for _ in 0..trials {
        let count = rng.gen_range(0..12);
        let pts = separated_points(&mut rng, 64, count, 5.0, 3);
        let map = encode_location_map(&pts, (64, 64), &GtEncoder::default())?;
        let mut got = decode_peaks(&map, &DecoderConfig::default());
        let mut want = pts.clone();
        let key = |p: &Point| (p.y as i64, p.x as i64);
        got.sort_by_key(key);
        want.sort_by_key(key);
        if got != want {
            locmap = 1.0;
        }
        let q = LocationMap::new(8, 8, (0..64).map(|i| (i as f64 * 1031.0) % 65536.0 / 65535.0).collect())?;
        let back = from_pgm16(&to_pgm16(&q))?;
        pgm = pgm.max(q.values().iter().zip(back.values()).fold(0.0, |m, (a, b)| m.max((a - b).abs())));
    }
    let m = Fsol::<f32>::new(ModelConfig::desk(), seed)?;
    let ck = checkpoint::decode::<f32>(&checkpoint::encode(&m))?;
    let mut ckpt = 0.0f64;
    for ((_, a), (_, b)) in m.params().iter().zip(&ck.tensors) {
        if a.data().iter().zip(b.data()).any(|(x, y)| x.to_bits() != y.to_bits()) {
            ckpt = 1.0;
        }
    }
    Ok(vec![
        SuiteResult {
            name: "roundtrip locmap".into(),
            checks: trials,
            max_error: locmap,
            tolerance: 0.0,
        },
        SuiteResult {
            name: "roundtrip pgm16".into(),
            checks: trials,
            max_error: pgm,
            tolerance: 0.0,
        },
        SuiteResult {
            name: "roundtrip checkpoint f32".into(),
            checks: 1,
            max_error: ckpt,
            tolerance: 0.0,
        },
    ])
}

/// Up to `count` integer points on an `n × n` canvas, pairwise at least
/// `min_dist` apart and `margin` pixels from the border.
pub fn separated_points(rng: &mut ChaCha8Rng, n: usize, count: usize, min_dist: f64, margin: usize) -> Vec<Point> {
    let mut pts: Vec<Point> = Vec::new();
    for _ in 0..count * 50 {
        if pts.len() == count {
            break;
        }
        let p = Point::new(
            rng.gen_range(margin..n - margin) as f64,
            rng.gen_range(margin..n - margin) as f64,
        );
        if pts.iter().all(|q| q.distance(&p) >= min_dist) {
            pts.push(p);
        }
    }
    pts
}

/// Exhaustive optimum over all partial injections: most pairs, then least
/// total distance.
pub fn brute_force_matching(pred: &[Point], gt: &[Point], sigma: f64) -> (usize, f64) {
    fn go(i: usize, pred: &[Point], gt: &[Point], used: &mut Vec<bool>, sigma: f64) -> (usize, f64) {
        if i == pred.len() {
            return (0, 0.0);
        }
        let mut best = go(i + 1, pred, gt, used, sigma);
        for j in 0..gt.len() {
            let d = pred[i].distance(&gt[j]);
            if used[j] || d > sigma {
                continue;
            }
            used[j] = true;
            let (n, c) = go(i + 1, pred, gt, used, sigma);
            used[j] = false;
            let cand = (n + 1, c + d);
            if cand.0 > best.0 || (cand.0 == best.0 && cand.1 < best.1) {
                best = cand;
            }
        }
        best
    }
    go(0, pred, gt, &mut vec![false; gt.len()], sigma)
}

/// Matching against exhaustive search; error counts pair mismatches plus the
/// total-distance gap.
pub fn matching_suite(trials: usize, seed: u64) -> Result<SuiteResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let np = rng.gen_range(0..=6);
        let ng = rng.gen_range(0..=6);
        let pt = |r: &mut ChaCha8Rng| Point::new(r.gen_range(0.0..30.0), r.gen_range(0.0..30.0));
        let pred: Vec<Point> = (0..np).map(|_| pt(&mut rng)).collect();
        let gt: Vec<Point> = (0..ng).map(|_| pt(&mut rng)).collect();
        let sigma = rng.gen_range(2.0..15.0);
        let m = match_points(&pred, &gt, sigma)?;
        let (n, d) = brute_force_matching(&pred, &gt, sigma);
        let err = (m.tp as f64 - n as f64).abs() + (m.total_distance() - d).abs();
        worst = worst.max(err);
    }
    Ok(SuiteResult {
        name: "metrics matching".into(),
        checks: trials,
        max_error: worst,
        tolerance: 1e-9,
    })
}

/// Runs every suite. `quick` trims trial counts.
pub fn run_all(seed: u64, quick: bool) -> Result<VerifyReport> {
    let (trials, samples, per_group) = if quick { (40, 3, 1) } else { (200, 6, 3) };
    let mut suites = kernel_oracles(trials, seed)?;
    suites.extend(degenerate_reductions(trials, seed + 1)?);
    suites.extend(op_gradients(samples, seed + 2)?);
    suites.push(pipeline_gradient(per_group, seed + 3)?);
    suites.extend(roundtrips(trials.min(100), seed + 4)?);
    suites.push(matching_suite(if quick { 100 } else { 500 }, seed + 5)?);
    Ok(VerifyReport { suites })
}
