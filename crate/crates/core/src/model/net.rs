//! The localization network: backbone, support cropping, dual-path feature
//! augmentation, stacked correlation, self query and regression head.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{ModelConfig, SqResidual};
use super::params::{Bound, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::kernels::Conv2dGeometry;
use crate::locmap::LocationMap;
use crate::tensor::ops::Window;
use crate::tensor::{GradTape, Scalar, Tensor, Var};

/// Denominator guard of the self-query cosine.
pub const COSINE_EPS: f64 = 1e-12;

/// Side of the pooled support feature.
pub const SUPPORT_SIDE: usize = 3;

/// Axis-aligned box in image pixels, `x` rightward and `y` downward.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x1 && x <= self.x2 && y >= self.y1 && y <= self.y2
    }

    pub fn scaled(&self, sx: f64, sy: f64) -> Self {
        Self::new(self.x1 * sx, self.y1 * sy, self.x2 * sx, self.y2 * sy)
    }

    /// Positive area and inside a `width × height` image.
    pub fn check_within(&self, width: usize, height: usize) -> Result<()> {
        let finite = [self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite());
        if !finite || self.width() <= 0.0 || self.height() <= 0.0 {
            return Err(Error::invalid("box", format!("{self:?} has no area")));
        }
        if self.x1 < 0.0 || self.y1 < 0.0 || self.x2 > width as f64 || self.y2 > height as f64 {
            return Err(Error::invalid(
                "box",
                format!("{self:?} leaves the {width}x{height} image"),
            ));
        }
        Ok(())
    }

    /// Feature-grid window covering the box at stride `s`: start coordinates
    /// are floored, end coordinates ceiled, both clamped to the grid.
    pub fn feature_window(&self, stride: usize, grid_h: usize, grid_w: usize) -> Result<Window> {
        let s = stride as f64;
        let clamp = |v: f64, hi: usize| (v.max(0.0) as usize).min(hi);
        let x0 = clamp((self.x1 / s).floor(), grid_w);
        let x1 = clamp((self.x2 / s).ceil(), grid_w);
        let y0 = clamp((self.y1 / s).floor(), grid_h);
        let y1 = clamp((self.y2 / s).ceil(), grid_h);
        if x1 <= x0 || y1 <= y0 {
            return Err(Error::invalid(
                "crop_support",
                format!("box {self:?} maps to an empty window on the {grid_h}x{grid_w} grid at stride {stride}"),
            ));
        }
        Ok(Window {
            y0,
            x0,
            h: y1 - y0,
            w: x1 - x0,
        })
    }
}

/// Crops the support window out of `fq` and pools it to `C × 3 × 3`.
pub fn crop_support<T: Scalar>(tape: &mut GradTape<T>, fq: Var, bbox: &BBox, stride: usize) -> Result<Var> {
    let (_, _, h, w) = tape.value(fq).dims4("crop_support")?;
    bbox.check_within(w * stride, h * stride)
        .map_err(|e| Error::invalid("crop_support", e.to_string()))?;
    let win = bbox.feature_window(stride, h, w)?;
    let cropped = tape.crop(fq, win)?;
    tape.adaptive_avg_pool(cropped, (SUPPORT_SIDE, SUPPORT_SIDE))
}

#[derive(Debug, Clone, Copy)]
struct Conv {
    w: ParamId,
    b: Option<ParamId>,
    geo: Conv2dGeometry,
}

impl Conv {
    fn apply<T: Scalar>(&self, tape: &mut GradTape<T>, p: &Bound, x: Var) -> Result<Var> {
        tape.conv2d(x, p.var(self.w), self.b.map(|b| p.var(b)), self.geo)
    }
}

#[derive(Debug, Clone, Copy)]
enum DeformBranch {
    Deform { conv: Conv, offset: Conv, mask: Conv },
    Plain(Conv),
}

#[derive(Debug, Clone, Copy)]
enum GradientBranch {
    Ccdc { w: ParamId, b: ParamId },
    Plain(Conv),
}

/// Tape handles of the four augmented feature maps.
#[derive(Debug, Clone, Copy)]
pub struct Branches {
    pub query_d: Var,
    pub support_d: Var,
    pub query_c: Var,
    pub support_c: Var,
}

/// Tape handles of every intermediate of one episode.
#[derive(Debug, Clone, Copy)]
pub struct Trace {
    pub fq: Var,
    pub fs: Var,
    pub branches: Branches,
    pub s: Var,
    pub w: Option<Var>,
    pub s_sq: Option<Var>,
    pub map: Var,
}

/// Values of the intermediates of one episode.
#[derive(Debug, Clone)]
pub struct EpisodeFeatures<T> {
    pub fq: Tensor<T>,
    pub fs: Tensor<T>,
    pub fq_d: Tensor<T>,
    pub fs_d: Tensor<T>,
    pub fq_c: Tensor<T>,
    pub fs_c: Tensor<T>,
    pub s: Tensor<T>,
    pub w: Option<Tensor<T>>,
    pub s_sq: Option<Tensor<T>>,
    pub map: Tensor<T>,
}

impl<T: Scalar> EpisodeFeatures<T> {
    pub fn from_trace(tape: &GradTape<T>, t: &Trace) -> Self {
        let v = |x: Var| tape.value(x).clone();
        Self {
            fq: v(t.fq),
            fs: v(t.fs),
            fq_d: v(t.branches.query_d),
            fs_d: v(t.branches.support_d),
            fq_c: v(t.branches.query_c),
            fs_c: v(t.branches.support_c),
            s: v(t.s),
            w: t.w.map(v),
            s_sq: t.s_sq.map(v),
            map: v(t.map),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Fsol<T> {
    cfg: ModelConfig,
    params: ParamStore<T>,
    stem: Vec<Conv>,
    stages: Vec<Vec<Conv>>,
    projection: Conv,
    deform: DeformBranch,
    gradient: GradientBranch,
    /// `(In_conv, Out_conv)` when self query is enabled.
    sq: Option<(ParamId, ParamId)>,
    head: Vec<Conv>,
    head_out: Conv,
}

struct Builder<'a, T> {
    params: ParamStore<T>,
    rng: &'a mut ChaCha8Rng,
}

impl<T: Scalar> Builder<'_, T> {
    /// Uniform weights with variance `gain / fan_in`.
    fn weight(&mut self, name: &str, shape: &[usize], gain: f64) -> ParamId {
        let fan_in: usize = shape[1..].iter().product();
        let bound = (3.0 * gain / fan_in as f64).sqrt();
        let t = Tensor::rand_uniform(shape, -bound, bound, self.rng).expect("positive extents");
        self.params.add(format!("{name}.weight"), t)
    }

    fn zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.params.add(name, Tensor::zeros(shape).expect("positive extents"))
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize, bias: bool, gain: f64) -> Conv {
        let w = self.weight(name, &[cout, cin, k, k], gain);
        let b = bias.then(|| self.zeros(&format!("{name}.bias"), &[cout]));
        Conv {
            w,
            b,
            geo: Conv2dGeometry { stride, padding: k / 2 },
        }
    }

    fn zero_conv(&mut self, name: &str, cin: usize, cout: usize, k: usize) -> Conv {
        let w = self.zeros(&format!("{name}.weight"), &[cout, cin, k, k]);
        let b = Some(self.zeros(&format!("{name}.bias"), &[cout]));
        Conv {
            w,
            b,
            geo: Conv2dGeometry::same(k),
        }
    }
}

/// Variance gain for layers followed by a leaky ReLU.
const RELU_GAIN: f64 = 2.0;
const LINEAR_GAIN: f64 = 1.0;

impl<T: Scalar> Fsol<T> {
    /// Fresh model with seeded random weights. Offset and modulation
    /// predictors start at zero, so sampling starts on the regular grid.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder {
            params: ParamStore::new(),
            rng: &mut rng,
        };
        let bb = &cfg.backbone;
        let mut stem = vec![b.conv("backbone.stem.0", 3, bb.stem.channels, 3, bb.stem.stride, true, RELU_GAIN)];
        for j in 0..bb.extra_convs {
            let c = bb.stem.channels;
            stem.push(b.conv(&format!("backbone.stem.{}", j + 1), c, c, 3, 1, true, RELU_GAIN));
        }
        let mut stages = Vec::new();
        let mut cin = bb.stem.channels;
        for (i, s) in bb.stages.iter().enumerate() {
            let mut convs = vec![b.conv(&format!("backbone.stage{i}.0"), cin, s.channels, 3, s.stride, true, RELU_GAIN)];
            for j in 0..bb.extra_convs {
                let name = format!("backbone.stage{i}.{}", j + 1);
                convs.push(b.conv(&name, s.channels, s.channels, 3, 1, true, RELU_GAIN));
            }
            stages.push(convs);
            cin = s.channels;
        }
        let c = cfg.channels();
        let projection = b.conv("backbone.projection", bb.concat_width(), c, 1, 1, true, LINEAR_GAIN);
        let deform = if cfg.ablation.use_dc {
            DeformBranch::Deform {
                conv: b.conv("dfa.dc", c, c, 3, 1, true, LINEAR_GAIN),
                offset: b.zero_conv("dfa.dc_offset", c, 2 * 9, 3),
                mask: b.zero_conv("dfa.dc_mask", c, 9, 3),
            }
        } else {
            DeformBranch::Plain(b.conv("dfa.dc_plain", c, c, 3, 1, true, LINEAR_GAIN))
        };
        let gradient = if cfg.ablation.use_ccdc {
            GradientBranch::Ccdc {
                w: b.weight("dfa.ccdc", &[c, c, 5], LINEAR_GAIN),
                b: b.zeros("dfa.ccdc.bias", &[c]),
            }
        } else {
            GradientBranch::Plain(b.conv("dfa.ccdc_plain", c, c, 3, 1, true, LINEAR_GAIN))
        };
        let sq = cfg.ablation.use_sq.then(|| {
            (
                b.weight("sq.in", &[c, c, 1, 1], LINEAR_GAIN),
                b.weight("sq.out", &[c, c, 1, 1], LINEAR_GAIN),
            )
        });
        let mut head = Vec::new();
        let mut cin = c;
        for (i, &w) in cfg.head_widths.iter().enumerate() {
            head.push(b.conv(&format!("head.{i}"), cin, w, 3, 1, true, RELU_GAIN));
            cin = w;
        }
        let head_out = b.conv("head.out", cin, 1, 1, 1, true, LINEAR_GAIN);
        Ok(Self {
            params: b.params,
            cfg,
            stem,
            stages,
            projection,
            deform,
            gradient,
            sq,
            head,
            head_out,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Distinct layers, each counted once however often it is applied.
    pub fn layer_census(&self) -> Vec<String> {
        let mut layers: Vec<String> = Vec::new();
        for (name, _) in self.params.iter() {
            let layer = name.rsplit_once('.').map_or(name, |(l, _)| l).to_string();
            if !layers.contains(&layer) {
                layers.push(layer);
            }
        }
        layers
    }

    fn slope(&self) -> T {
        T::lit(self.cfg.leaky_slope)
    }

    /// `1 × 3 × R × R` image to `1 × C × R/s × R/s` query features.
    pub fn extract_features(&self, tape: &mut GradTape<T>, p: &Bound, image: Var) -> Result<Var> {
        let (_, ch, h, w) = tape.value(image).dims4("extract_features")?;
        if ch != 3 {
            return Err(Error::shape("extract_features", format!("expected 3 channels, got {ch}")));
        }
        let side = self.cfg.backbone.feature_side(h)?;
        if h != w {
            return Err(Error::shape("extract_features", format!("expected a square image, got {h}x{w}")));
        }
        let slope = self.slope();
        let mut x = image;
        for conv in &self.stem {
            x = conv.apply(tape, p, x)?;
            x = tape.leaky_relu(x, slope);
        }
        let mut outs = Vec::new();
        for stage in &self.stages {
            for conv in stage {
                x = conv.apply(tape, p, x)?;
                x = tape.leaky_relu(x, slope);
            }
            let (_, _, sh, _) = tape.value(x).dims4("stage")?;
            outs.push(if sh == side {
                x
            } else {
                tape.bilinear_upsample(x, (side, side))?
            });
        }
        let cat = tape.concat_channels(&outs)?;
        self.projection.apply(tape, p, cat)
    }

    fn deform_apply(&self, tape: &mut GradTape<T>, p: &Bound, x: Var) -> Result<Var> {
        match &self.deform {
            DeformBranch::Deform { conv, offset, mask } => {
                let off = offset.apply(tape, p, x)?;
                let m = mask.apply(tape, p, x)?;
                let m = tape.sigmoid(m);
                tape.deform_conv2d(x, p.var(conv.w), conv.b.map(|b| p.var(b)), off, m, conv.geo)
            }
            DeformBranch::Plain(conv) => conv.apply(tape, p, x),
        }
    }

    fn gradient_apply(&self, tape: &mut GradTape<T>, p: &Bound, x: Var) -> Result<Var> {
        match &self.gradient {
            GradientBranch::Ccdc { w, b } => tape.ccdc_hv(x, p.var(*w), Some(p.var(*b)), T::lit(self.cfg.theta)),
            GradientBranch::Plain(conv) => conv.apply(tape, p, x),
        }
    }

    /// Applies the shared deformation and gradient layers to both feature maps.
    pub fn dfa_forward(&self, tape: &mut GradTape<T>, p: &Bound, fq: Var, fs: Var) -> Result<Branches> {
        let (cq, cs) = (tape.value(fq).shape()[1], tape.value(fs).shape()[1]);
        if cq != cs || cq != self.cfg.channels() {
            return Err(Error::shape(
                "dfa_forward",
                format!("query has {cq} channels, support {cs}, model {}", self.cfg.channels()),
            ));
        }
        Ok(Branches {
            query_d: self.deform_apply(tape, p, fq)?,
            support_d: self.deform_apply(tape, p, fs)?,
            query_c: self.gradient_apply(tape, p, fq)?,
            support_c: self.gradient_apply(tape, p, fs)?,
        })
    }

    /// Returns `(W, S_SQ)`, or `None` when self query is disabled.
    pub fn self_query(&self, tape: &mut GradTape<T>, p: &Bound, s: Var, fq: Var) -> Result<Option<(Var, Var)>> {
        self.sq
            .map(|(i, o)| self_query(tape, s, fq, p.var(i), p.var(o), self.cfg.sq_residual))
            .transpose()
    }

    /// Conv blocks with ×2 upsampling between them, then a 1-channel
    /// projection.
    pub fn regression_head(&self, tape: &mut GradTape<T>, p: &Bound, x: Var, out_hw: (usize, usize)) -> Result<Var> {
        let (_, _, h, w) = tape.value(x).dims4("regression_head")?;
        let k = self.head.len() - 1;
        if (h << k, w << k) != out_hw {
            return Err(Error::invalid(
                "regression_head",
                format!("{} blocks map {h}x{w} to {}x{}, not {}x{}", self.head.len(), h << k, w << k, out_hw.0, out_hw.1),
            ));
        }
        let slope = self.slope();
        let mut x = x;
        for (i, conv) in self.head.iter().enumerate() {
            if i > 0 {
                let (_, _, h, w) = tape.value(x).dims4("regression_head")?;
                x = tape.bilinear_upsample(x, (2 * h, 2 * w))?;
            }
            x = conv.apply(tape, p, x)?;
            x = tape.leaky_relu(x, slope);
        }
        self.head_out.apply(tape, p, x)
    }

    /// Full pass from image and exemplar box to the location map.
    pub fn forward(&self, tape: &mut GradTape<T>, p: &Bound, image: &Tensor<T>, bbox: &BBox) -> Result<Trace> {
        let (_, _, h, w) = image.dims4("forward")?;
        let img = tape.constant(image.clone());
        let fq = self.extract_features(tape, p, img)?;
        let fs = crop_support(tape, fq, bbox, self.cfg.backbone.feature_stride())?;
        let branches = self.dfa_forward(tape, p, fq, fs)?;
        let s = similarity_forward(tape, &branches)?;
        let (w_sq, s_sq, head_in) = match self.self_query(tape, p, s, fq)? {
            Some((wv, ssq)) => (Some(wv), Some(ssq), ssq),
            None => (None, None, s),
        };
        let map = self.regression_head(tape, p, head_in, (h, w))?;
        Ok(Trace {
            fq,
            fs,
            branches,
            s,
            w: w_sq,
            s_sq,
            map,
        })
    }

    /// Forward pass returning every intermediate value.
    pub fn features(&self, image: &Tensor<T>, bbox: &BBox) -> Result<EpisodeFeatures<T>> {
        let mut tape = GradTape::new();
        let p = self.params.bind(&mut tape);
        let t = self.forward(&mut tape, &p, image, bbox)?;
        Ok(EpisodeFeatures::from_trace(&tape, &t))
    }

    pub fn predict(&self, image: &Tensor<T>, bbox: &BBox) -> Result<LocationMap> {
        LocationMap::from_tensor(&self.features(image, bbox)?.map)
    }

    /// Perturbs every parameter with uniform noise of half-width `scale`.
    /// Used to move zero-initialised predictors off their symmetric start in
    /// gradient checks.
    pub fn jitter(&mut self, scale: f64, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for id in self.params.ids().collect::<Vec<_>>() {
            for v in self.params.get_mut(id).data_mut() {
                *v += T::lit(rng.gen_range(-scale..scale));
            }
        }
    }
}

/// Depth-stacks deformation then gradient outputs and correlates the query
/// stack with the support stack.
pub fn similarity_forward<T: Scalar>(tape: &mut GradTape<T>, b: &Branches) -> Result<Var> {
    tape.conv3d_dual([b.query_d, b.query_c], [b.support_d, b.support_c])
}

/// Self query with explicit `C × C × 1 × 1` input and output projections.
/// Returns the weight map `W` (`B × 1 × H × W`) and `S_SQ`.
pub fn self_query<T: Scalar>(
    tape: &mut GradTape<T>,
    s: Var,
    fq: Var,
    in_conv: Var,
    out_conv: Var,
    residual: SqResidual,
) -> Result<(Var, Var)> {
    if tape.value(s).shape() != tape.value(fq).shape() {
        return Err(Error::shape(
            "self_query",
            format!("S {:?} vs F_Q {:?}", tape.value(s).shape(), tape.value(fq).shape()),
        ));
    }
    let one = Conv2dGeometry { stride: 1, padding: 0 };
    let st = tape.conv2d(s, in_conv, None, one)?;
    let fqt = tape.conv2d(fq, in_conv, None, one)?;
    let w = tape.cosine_similarity(st, fqt, T::lit(COSINE_EPS))?;
    let base = match residual {
        SqResidual::Transformed => fqt,
        SqResidual::Raw => fq,
    };
    let sum = tape.add(base, w)?;
    let out = tape.conv2d(sum, out_conv, None, one)?;
    Ok((w, out))
}
