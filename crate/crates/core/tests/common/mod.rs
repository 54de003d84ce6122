//! Test-side oracles. Written independently of `fsol::verify` so the two
//! can disagree.

#![allow(dead_code)]

use fsol::metrics::Point;
use fsol::tensor::{GradTape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::rand_uniform(shape, -1.0, 1.0, rng).unwrap()
}

pub fn max_abs(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// `x` as `[n][c][h][w]` nested vectors with `pad` zeros on every side.
fn padded(x: &Tensor<f64>, pad: usize) -> Vec<Vec<Vec<Vec<f64>>>> {
    let s = x.shape();
    let mut out = vec![vec![vec![vec![0.0; s[3] + 2 * pad]; s[2] + 2 * pad]; s[1]]; s[0]];
    for (n, plane) in out.iter_mut().enumerate() {
        for (c, img) in plane.iter_mut().enumerate() {
            for y in 0..s[2] {
                for xx in 0..s[3] {
                    img[y + pad][xx + pad] = x.get(&[n, c, y, xx]);
                }
            }
        }
    }
    out
}

pub fn conv2d(x: &Tensor<f64>, w: &Tensor<f64>, bias: Option<&[f64]>, stride: usize, pad: usize) -> Tensor<f64> {
    let (n, ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let xp = padded(x, pad);
    Tensor::from_fn(&[n, co, oh, ow], |i| {
        let (b, o, y, xx) = (i[0], i[1], i[2], i[3]);
        let mut acc = bias.map_or(0.0, |bs| bs[o]);
        for c in 0..ci {
            for ky in 0..kh {
                for kx in 0..kw {
                    acc += w.get(&[o, c, ky, kx]) * xp[b][c][y * stride + ky][xx * stride + kx];
                }
            }
        }
        acc
    })
    .unwrap()
}

/// Bilinear sample of channel `c` at fractional `(y, x)`, zero outside.
pub fn bilinear(x: &Tensor<f64>, b: usize, c: usize, y: f64, xx: f64) -> f64 {
    let (h, w) = (x.shape()[2] as i64, x.shape()[3] as i64);
    let (y0, x0) = (y.floor(), xx.floor());
    let (fy, fx) = (y - y0, xx - x0);
    let mut acc = 0.0;
    for (dy, wy) in [(0i64, 1.0 - fy), (1, fy)] {
        for (dx, wx) in [(0i64, 1.0 - fx), (1, fx)] {
            let (py, px) = (y0 as i64 + dy, x0 as i64 + dx);
            if py >= 0 && py < h && px >= 0 && px < w {
                acc += wy * wx * x.get(&[b, c, py as usize, px as usize]);
            }
        }
    }
    acc
}

pub fn deform(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    bias: Option<&[f64]>,
    offsets: &Tensor<f64>,
    masks: &Tensor<f64>,
    stride: usize,
    pad: usize,
) -> Tensor<f64> {
    let (n, ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    Tensor::from_fn(&[n, co, oh, ow], |i| {
        let (b, o, y, xx) = (i[0], i[1], i[2], i[3]);
        let mut acc = bias.map_or(0.0, |bs| bs[o]);
        for ky in 0..kh {
            for kx in 0..kw {
                let k = ky * kw + kx;
                let sy = (y * stride + ky) as f64 - pad as f64 + offsets.get(&[b, 2 * k, y, xx]);
                let sx = (xx * stride + kx) as f64 - pad as f64 + offsets.get(&[b, 2 * k + 1, y, xx]);
                let m = masks.get(&[b, k, y, xx]);
                for c in 0..ci {
                    acc += w.get(&[o, c, ky, kx]) * bilinear(x, b, c, sy, sx) * m;
                }
            }
        }
        acc
    })
    .unwrap()
}

pub const CROSS: [(i64, i64); 5] = [(-1, 0), (0, -1), (0, 0), (0, 1), (1, 0)];

/// Cross-shaped central difference convolution. Taps falling outside the
/// image contribute to neither sum.
pub fn ccdc(x: &Tensor<f64>, w: &Tensor<f64>, bias: Option<&[f64]>, theta: f64) -> Tensor<f64> {
    let (n, ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let co = w.shape()[0];
    Tensor::from_fn(&[n, co, h, wd], |i| {
        let (b, o, y, xx) = (i[0], i[1], i[2], i[3]);
        let mut diff = 0.0;
        let mut raw = 0.0;
        for c in 0..ci {
            let centre = x.get(&[b, c, y, xx]);
            for (k, (dy, dx)) in CROSS.iter().enumerate() {
                let (py, px) = (y as i64 + dy, xx as i64 + dx);
                if py < 0 || px < 0 || py >= h as i64 || px >= wd as i64 {
                    continue;
                }
                let v = x.get(&[b, c, py as usize, px as usize]);
                diff += w.get(&[o, c, k]) * (v - centre);
                raw += w.get(&[o, c, k]) * v;
            }
        }
        theta * diff + (1.0 - theta) * raw + bias.map_or(0.0, |bs| bs[o])
    })
    .unwrap()
}

/// Per-channel correlation with "same" zero padding.
pub fn corr(q: &Tensor<f64>, k: &Tensor<f64>) -> Tensor<f64> {
    let (kh, kw) = (k.shape()[2], k.shape()[3]);
    let qp = padded(q, kh / 2);
    Tensor::from_fn(q.shape(), |i| {
        let (b, c, y, xx) = (i[0], i[1], i[2], i[3]);
        let mut acc = 0.0;
        for ky in 0..kh {
            for kx in 0..kw {
                acc += k.get(&[b, c, ky, kx]) * qp[b][c][y + ky][xx + kx];
            }
        }
        acc
    })
    .unwrap()
}

pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Largest relative error between tape gradients of `⟨r, op(inputs)⟩` and
/// central differences with step `h`, over `samples` coordinates per input.
pub fn fd_check(
    inputs: &[Tensor<f64>],
    op: impl Fn(&mut GradTape<f64>, &[Var]) -> Var,
    samples: usize,
    h: f64,
    rng: &mut ChaCha8Rng,
) -> f64 {
    let forward = |vals: &[Tensor<f64>]| -> Tensor<f64> {
        let mut tape = GradTape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.constant(t.clone())).collect();
        let out = op(&mut tape, &vars);
        tape.value(out).clone()
    };
    let out = forward(inputs);
    let r: Vec<f64> = (0..out.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let dot = |t: &Tensor<f64>| t.data().iter().zip(&r).map(|(a, b)| a * b).sum::<f64>();

    let mut tape = GradTape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone().with_grad())).collect();
    let y = op(&mut tape, &vars);
    let rv = tape.constant(Tensor::new(out.shape(), r.clone()).unwrap());
    let prod = tape.mul(y, rv).unwrap();
    let loss = tape.sum(prod);
    tape.backward(loss).unwrap();

    let mut worst = 0.0f64;
    for (i, v) in vars.iter().enumerate() {
        let grad = tape.grad(*v).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; inputs[i].numel()]);
        for _ in 0..samples {
            let j = rng.gen_range(0..inputs[i].numel());
            let mut p = inputs.to_vec();
            p[i].data_mut()[j] += h;
            let mut m = inputs.to_vec();
            m[i].data_mut()[j] -= h;
            let numeric = (dot(&forward(&p)) - dot(&forward(&m))) / (2.0 * h);
            worst = worst.max(relative_error(grad[j], numeric));
        }
    }
    worst
}

/// Best partial matching by enumerating, for each ground-truth point, every
/// still-free prediction or none. Returns `(pairs, total distance)`.
pub fn brute_matching(pred: &[Point], gt: &[Point], sigma: f64) -> (usize, f64) {
    fn rec(g: usize, pred: &[Point], gt: &[Point], taken: u32, sigma: f64) -> (usize, f64) {
        if g == gt.len() {
            return (0, 0.0);
        }
        let mut best = rec(g + 1, pred, gt, taken, sigma);
        for (p, q) in pred.iter().enumerate() {
            let d = q.distance(&gt[g]);
            if taken & (1 << p) != 0 || d > sigma {
                continue;
            }
            let (k, c) = rec(g + 1, pred, gt, taken | (1 << p), sigma);
            if k + 1 > best.0 || (k + 1 == best.0 && c + d < best.1) {
                best = (k + 1, c + d);
            }
        }
        best
    }
    rec(0, pred, gt, 0, sigma)
}

pub fn random_points(rng: &mut ChaCha8Rng, n: usize, extent: f64) -> Vec<Point> {
    (0..n)
        .map(|_| Point::new(rng.gen_range(0.0..extent), rng.gen_range(0.0..extent)))
        .collect()
}

/// Rejection-sampled integer points with pairwise separation and border
/// margin.
pub fn separated(rng: &mut ChaCha8Rng, side: usize, count: usize, sep: f64, margin: usize) -> Vec<Point> {
    let mut pts: Vec<Point> = Vec::with_capacity(count);
    let mut attempts = 0;
    while pts.len() < count && attempts < 10_000 {
        attempts += 1;
        let p = Point::new(
            rng.gen_range(margin..side - margin) as f64,
            rng.gen_range(margin..side - margin) as f64,
        );
        if pts.iter().all(|q| q.distance(&p) >= sep) {
            pts.push(p);
        }
    }
    pts
}

pub fn sorted(mut pts: Vec<Point>) -> Vec<(i64, i64)> {
    let mut v: Vec<(i64, i64)> = pts.drain(..).map(|p| (p.x.round() as i64, p.y.round() as i64)).collect();
    v.sort();
    v
}
