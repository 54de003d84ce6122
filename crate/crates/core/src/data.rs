//! Episodes: synthetic shape scenes, the point-annotation loader and
//! dataset splits.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{Point, PointSet};
use crate::model::BBox;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// One query image with a single exemplar box and its point annotations.
#[derive(Debug, Clone)]
pub struct Episode {
    pub id: String,
    /// `1 × 3 × R × R`, values in `[0, 1]`.
    pub image: Tensor<f64>,
    pub exemplar: BBox,
    pub points: Vec<Point>,
    pub class: String,
    pub split: Option<Split>,
}

impl Episode {
    pub fn resolution(&self) -> (usize, usize) {
        let s = self.image.shape();
        (s[2], s[3])
    }

    pub fn point_set(&self) -> PointSet {
        PointSet::new(self.id.clone(), self.points.clone())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |detail: String| Error::invalid("episode", format!("{}: {detail}", self.id));
        let (_, c, h, w) = self.image.dims4("episode image")?;
        if c != 3 {
            return Err(fail(format!("image has {c} channels")));
        }
        if self.image.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(fail("image values outside [0, 1]".into()));
        }
        self.exemplar.check_within(w, h).map_err(|e| fail(e.to_string()))?;
        for (i, p) in self.points.iter().enumerate() {
            if !(p.x >= 0.0 && p.y >= 0.0 && p.x < w as f64 && p.y < h as f64) {
                return Err(fail(format!("point {i} ({}, {}) outside the {w}x{h} image", p.x, p.y)));
            }
        }
        let inside = self.points.iter().filter(|p| self.exemplar.contains(p.x, p.y)).count();
        if inside != 1 {
            return Err(fail(format!("exemplar box encloses {inside} points instead of 1")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Disc,
    Square,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Disc, Shape::Square, Shape::Triangle];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Disc => "disc",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown shape {s:?}")))
    }

    /// Whether `(x, y)` lies inside the shape of size `r` centred at the origin.
    fn contains(self, x: f64, y: f64, r: f64) -> bool {
        match self {
            Shape::Disc => x * x + y * y <= r * r,
            Shape::Square => x.abs() <= 0.8 * r && y.abs() <= 0.8 * r,
            Shape::Triangle => {
                // Upward equilateral triangle with circumradius r.
                let h = 0.5 * r;
                y <= h && y >= -r && x.abs() * 3f64.sqrt() <= y + r
            }
        }
    }

    /// Bounding box half-extents `(left/right, top, bottom)` for size `r`.
    fn extent(self, r: f64) -> (f64, f64, f64) {
        match self {
            Shape::Disc => (r, r, r),
            Shape::Square => (0.8 * r, 0.8 * r, 0.8 * r),
            Shape::Triangle => (r * 3f64.sqrt() / 2.0, r, 0.5 * r),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub canvas: usize,
    pub count_min: usize,
    pub count_max: usize,
    pub size_min: f64,
    pub size_max: f64,
    /// Minimum distance between object centres.
    pub min_center_distance: f64,
    /// Half-width of the per-object intensity jitter.
    pub intensity_jitter: f64,
    /// Standard deviation of additive pixel noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            canvas: 64,
            count_min: 3,
            count_max: 8,
            size_min: 4.0,
            size_max: 6.0,
            min_center_distance: 12.0,
            intensity_jitter: 0.1,
            noise: 0.02,
            seed: 0,
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        let ok = self.canvas > 0
            && self.count_min >= 1
            && self.count_min <= self.count_max
            && self.size_min > 0.0
            && self.size_min <= self.size_max
            && self.min_center_distance >= 0.0
            && 2.0 * (self.size_max + 1.0) < self.canvas as f64;
        if !ok {
            return Err(Error::Config(format!("inconsistent synthetic scene config {self:?}")));
        }
        Ok(())
    }
}

const PLACEMENT_TRIES: usize = 2000;
const SCENE_TRIES: usize = 20;

/// Renders one scene of `shape` objects. The scene is a pure function of
/// `(cfg, shape, index)`.
pub fn generate_scene(cfg: &SynthConfig, shape: Shape, index: u64) -> Result<Episode> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index ^ ((shape as u64) << 56));
    let r_canvas = cfg.canvas as f64;
    let k = rng.gen_range(cfg.count_min..=cfg.count_max);
    let mut objects: Vec<(f64, f64, f64)> = Vec::new();
    'scene: for _ in 0..SCENE_TRIES {
        objects.clear();
        for _ in 0..k {
            let mut placed = false;
            for _ in 0..PLACEMENT_TRIES {
                let size = rng.gen_range(cfg.size_min..=cfg.size_max);
                let lo = size + 1.0;
                let hi = r_canvas - size - 2.0;
                let (cx, cy) = (rng.gen_range(lo..hi), rng.gen_range(lo..hi));
                let far = objects
                    .iter()
                    .all(|&(ox, oy, _)| (ox - cx).hypot(oy - cy) >= cfg.min_center_distance);
                if far {
                    objects.push((cx, cy, size));
                    placed = true;
                    break;
                }
            }
            if !placed {
                continue 'scene;
            }
        }
        break;
    }
    if objects.len() != k {
        return Err(Error::invalid(
            "generate_scene",
            format!("could not place {k} objects under {cfg:?}"),
        ));
    }

    let n = cfg.canvas;
    let background = rng.gen_range(0.05..0.25);
    let base = rng.gen_range(0.65..0.9);
    let tint: [f64; 3] = [rng.gen_range(0.7..1.0), rng.gen_range(0.7..1.0), rng.gen_range(0.7..1.0)];
    let mut img = vec![background; 3 * n * n];
    let sub = [-0.25, 0.25];
    for &(cx, cy, size) in &objects {
        let level = base + rng.gen_range(-cfg.intensity_jitter..=cfg.intensity_jitter);
        let (x0, x1) = ((cx - size - 1.0).floor() as usize, (cx + size + 1.0).ceil() as usize);
        let (y0, y1) = ((cy - size - 1.0).floor() as usize, (cy + size + 1.0).ceil() as usize);
        for y in y0..=y1.min(n - 1) {
            for x in x0..=x1.min(n - 1) {
                let mut cover = 0.0;
                for sy in sub {
                    for sx in sub {
                        if shape.contains(x as f64 + sx - cx, y as f64 + sy - cy, size) {
                            cover += 0.25;
                        }
                    }
                }
                if cover > 0.0 {
                    for (c, t) in tint.iter().enumerate() {
                        let v = &mut img[(c * n + y) * n + x];
                        *v = *v * (1.0 - cover) + level * t * cover;
                    }
                }
            }
        }
    }
    if cfg.noise > 0.0 {
        for v in &mut img {
            // Sum of uniforms: cheap, bounded, roughly Gaussian.
            let u: f64 = (0..4).map(|_| rng.gen_range(-1.0..1.0)).sum::<f64>() * 0.866;
            *v = (*v + cfg.noise * u).clamp(0.0, 1.0);
        }
    }

    let pick = rng.gen_range(0..objects.len());
    let (cx, cy, size) = objects[pick];
    let (hx, top, bottom) = shape.extent(size);
    let exemplar = BBox::new(
        (cx - hx - 0.5).max(0.0),
        (cy - top - 0.5).max(0.0),
        (cx + hx + 0.5).min(r_canvas),
        (cy + bottom + 0.5).min(r_canvas),
    );
    let ep = Episode {
        id: format!("{}_{:05}", shape.name(), index),
        image: Tensor::new(&[1, 3, n, n], img)?,
        exemplar,
        points: objects.iter().map(|&(x, y, _)| Point::new(x, y)).collect(),
        class: shape.name().to_string(),
        split: None,
    };
    ep.validate()?;
    Ok(ep)
}

/// `per_class` scenes of each listed shape, indices starting at `first_index`.
pub fn synth_dataset(cfg: &SynthConfig, shapes: &[Shape], per_class: usize, first_index: u64) -> Result<Vec<Episode>> {
    let mut out = Vec::with_capacity(shapes.len() * per_class);
    for i in 0..per_class as u64 {
        for &s in shapes {
            out.push(generate_scene(cfg, s, first_index + i)?);
        }
    }
    Ok(out)
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    points: Vec<[f64; 2]>,
    boxes: Vec<[f64; 4]>,
    #[serde(default)]
    class: Option<String>,
}

/// Result of reading an annotation document.
#[derive(Debug, Default)]
pub struct LoadReport {
    pub episodes: Vec<Episode>,
    /// `(image name, reason)` for every skipped record.
    pub skipped: Vec<(String, String)>,
    pub warnings: Vec<String>,
}

/// Reads `{"<image>": {"points": [[x, y], ...], "boxes": [[x1, y1, x2, y2],
/// ...], "class": "<label>"}}` from `annotations`, loads the images from
/// `root`, resizes them to `r × r` and rescales coordinates by the same
/// factors. The first box is the exemplar. Bad records are skipped and
/// reported.
pub fn load_annotations(root: &Path, annotations: &Path, r: usize) -> Result<LoadReport> {
    let text = std::fs::read_to_string(annotations).map_err(|e| Error::io(annotations, e))?;
    let doc: BTreeMap<String, serde_json::Value> = serde_json::from_str(&text).map_err(|e| Error::Format {
        format: "annotation json",
        detail: format!("{}: {e}", annotations.display()),
    })?;
    let mut report = LoadReport::default();
    if doc.is_empty() {
        report
            .warnings
            .push(format!("{} contains no records", annotations.display()));
    }
    for (name, value) in doc {
        match load_record(root, &name, value, r) {
            Ok(ep) => report.episodes.push(ep),
            Err(e) => report.skipped.push((name, e.to_string())),
        }
    }
    Ok(report)
}

fn load_record(root: &Path, name: &str, value: serde_json::Value, r: usize) -> Result<Episode> {
    let rec: Record = serde_json::from_value(value).map_err(|e| Error::Format {
        format: "annotation record",
        detail: e.to_string(),
    })?;
    let path: PathBuf = root.join(name);
    let img = image::open(&path).map_err(|source| Error::Image {
        path: path.clone(),
        source,
    })?;
    let (w0, h0) = (img.width() as f64, img.height() as f64);
    let rgb = img
        .resize_exact(r as u32, r as u32, image::imageops::FilterType::Triangle)
        .to_rgb8();
    let (sx, sy) = (r as f64 / w0, r as f64 / h0);
    let mut data = vec![0.0; 3 * r * r];
    for (x, y, px) in rgb.enumerate_pixels() {
        for c in 0..3 {
            data[(c * r + y as usize) * r + x as usize] = px[c] as f64 / 255.0;
        }
    }
    let first = rec
        .boxes
        .first()
        .ok_or_else(|| Error::invalid("load_annotations", "record has no exemplar box"))?;
    let exemplar = BBox::new(first[0], first[1], first[2], first[3]).scaled(sx, sy);
    let ep = Episode {
        id: name.to_string(),
        image: Tensor::new(&[1, 3, r, r], data)?,
        exemplar,
        points: rec.points.iter().map(|p| Point::new(p[0], p[1]).scaled(sx, sy)).collect(),
        class: rec.class.unwrap_or_default(),
        split: None,
    };
    validate_loaded(&ep)?;
    Ok(ep)
}

/// Real annotations may place several objects in the exemplar box, so only
/// bounds are enforced on loaded records.
fn validate_loaded(ep: &Episode) -> Result<()> {
    let (h, w) = ep.resolution();
    ep.exemplar.check_within(w, h)?;
    for (i, p) in ep.points.iter().enumerate() {
        if !(p.x >= 0.0 && p.y >= 0.0 && p.x < w as f64 && p.y < h as f64) {
            return Err(Error::invalid(
                "load_annotations",
                format!("point {i} ({}, {}) outside the {w}x{h} image after rescaling", p.x, p.y),
            ));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Protocol {
    /// Whole classes go to one partition; weights give the share of classes.
    ClassDisjoint { train: f64, val: f64, test: f64 },
    /// Images shuffled independently of class.
    RandomByImage { train: f64, val: f64, test: f64 },
}

#[derive(Debug, Clone, Default)]
pub struct Splits {
    pub train: Vec<Episode>,
    pub val: Vec<Episode>,
    pub test: Vec<Episode>,
}

impl Splits {
    pub fn get(&self, s: Split) -> &[Episode] {
        match s {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Sizes of three partitions of `n` items proportional to the weights.
fn shares(n: usize, w: [f64; 3]) -> Result<[usize; 3]> {
    let total: f64 = w.iter().sum();
    if w.iter().any(|v| !(*v >= 0.0)) || !(total > 0.0) {
        return Err(Error::Config(format!("bad split weights {w:?}")));
    }
    let val = ((n as f64) * w[1] / total).round() as usize;
    let test = ((n as f64) * w[2] / total).round() as usize;
    let val = val.max(usize::from(w[1] > 0.0 && n >= 3)).min(n);
    let test = test.max(usize::from(w[2] > 0.0 && n >= 3)).min(n - val);
    Ok([n - val - test, val, test])
}

pub fn split_episodes(episodes: Vec<Episode>, protocol: Protocol, seed: u64) -> Result<Splits> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Splits::default();
    let assign = |ep: Episode, s: Split, out: &mut Splits| {
        let ep = Episode { split: Some(s), ..ep };
        match s {
            Split::Train => out.train.push(ep),
            Split::Val => out.val.push(ep),
            Split::Test => out.test.push(ep),
        }
    };
    match protocol {
        Protocol::ClassDisjoint { train, val, test } => {
            let classes: BTreeSet<String> = episodes.iter().map(|e| e.class.clone()).collect();
            if classes.len() < 2 {
                return Err(Error::invalid(
                    "split_episodes",
                    format!("class-disjoint split needs at least 2 classes, found {}", classes.len()),
                ));
            }
            let mut classes: Vec<String> = classes.into_iter().collect();
            classes.shuffle(&mut rng);
            let [nt, nv, _] = shares(classes.len(), [train, val, test])?;
            let split_of = |c: &str| {
                let i = classes.iter().position(|x| x == c).unwrap();
                if i < nt {
                    Split::Train
                } else if i < nt + nv {
                    Split::Val
                } else {
                    Split::Test
                }
            };
            for ep in episodes {
                let s = split_of(&ep.class);
                assign(ep, s, &mut out);
            }
        }
        Protocol::RandomByImage { train, val, test } => {
            let mut episodes = episodes;
            episodes.shuffle(&mut rng);
            let [nt, nv, _] = shares(episodes.len(), [train, val, test])?;
            for (i, ep) in episodes.into_iter().enumerate() {
                let s = if i < nt {
                    Split::Train
                } else if i < nt + nv {
                    Split::Val
                } else {
                    Split::Test
                };
                assign(ep, s, &mut out);
            }
        }
    }
    Ok(out)
}
