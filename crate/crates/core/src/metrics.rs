//! Point matching under a distance threshold σ, precision / recall / F1 and
//! counting errors.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    /// Euclidean localization error between two centres.
    pub fn distance(&self, other: &Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn scaled(&self, sx: f64, sy: f64) -> Self {
        Self::new(self.x * sx, self.y * sy)
    }
}

/// Points belonging to one image.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PointSet {
    pub image_id: String,
    pub points: Vec<Point>,
}

impl PointSet {
    pub fn new(image_id: impl Into<String>, points: Vec<Point>) -> Self {
        Self {
            image_id: image_id.into(),
            points,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (i, p) in self.points.iter().enumerate() {
            if !(p.x.is_finite() && p.y.is_finite() && p.x >= 0.0 && p.y >= 0.0) {
                return Err(Error::invalid(
                    "point_set",
                    format!("{}: point {i} at ({}, {}) is not finite and nonnegative", self.image_id, p.x, p.y),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchedPair {
    pub pred: usize,
    pub gt: usize,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    pub pairs: Vec<MatchedPair>,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub sigma: f64,
}

impl MatchResult {
    pub fn total_distance(&self) -> f64 {
        self.pairs.iter().map(|p| p.distance).sum()
    }
}

/// Minimum-cost assignment of every row to a distinct column (`rows <= cols`),
/// Hungarian method with potentials. Returns the column of each row.
pub fn min_cost_assignment(cost: &[f64], rows: usize, cols: usize) -> Vec<usize> {
    assert!(rows <= cols, "assignment needs rows <= cols");
    assert_eq!(cost.len(), rows * cols);
    if rows == 0 {
        return Vec::new();
    }
    // 1-based arrays; column 0 is the virtual start column.
    let mut u = vec![0.0; rows + 1];
    let mut v = vec![0.0; cols + 1];
    let mut owner = vec![0usize; cols + 1];
    let mut way = vec![0usize; cols + 1];
    for row in 1..=rows {
        owner[0] = row;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; cols + 1];
        let mut used = vec![false; cols + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=cols {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * cols + (j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=cols {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0usize; rows];
    for j in 1..=cols {
        if owner[j] != 0 {
            assignment[owner[j] - 1] = j - 1;
        }
    }
    assignment
}

/// One-to-one matching of predictions to ground truth. Pairs further apart
/// than `sigma` cannot match; among matchings with the most pairs, the one
/// with the smallest total distance is returned.
pub fn match_points(pred: &[Point], gt: &[Point], sigma: f64) -> Result<MatchResult> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::invalid("match_points", format!("sigma must be positive, got {sigma}")));
    }
    let transpose = pred.len() > gt.len();
    let (rows, cols) = if transpose {
        (gt.len(), pred.len())
    } else {
        (pred.len(), gt.len())
    };
    let dist = |r: usize, c: usize| {
        let (p, g) = if transpose { (c, r) } else { (r, c) };
        pred[p].distance(&gt[g])
    };
    // Any assignment with one more gated pair beats any distance saving.
    let blocked = (rows as f64 + 1.0) * sigma * 2.0 + 1.0;
    let mut cost = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let d = dist(r, c);
            cost.push(if d <= sigma { d } else { blocked });
        }
    }
    let assignment = min_cost_assignment(&cost, rows, cols);
    let mut pairs: Vec<MatchedPair> = assignment
        .iter()
        .enumerate()
        .filter_map(|(r, &c)| {
            let d = dist(r, c);
            (d <= sigma).then(|| {
                let (p, g) = if transpose { (c, r) } else { (r, c) };
                MatchedPair { pred: p, gt: g, distance: d }
            })
        })
        .collect();
    pairs.sort_by_key(|p| (p.pred, p.gt));
    let tp = pairs.len();
    Ok(MatchResult {
        tp,
        fp: pred.len() - tp,
        fn_: gt.len() - tp,
        pairs,
        sigma,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Prf1 {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Precision, recall and F1 from raw counts; a zero denominator yields 0.
pub fn prf1_counts(tp: usize, fp: usize, fn_: usize) -> Prf1 {
    let ratio = |num: f64, den: f64| if den > 0.0 { num / den } else { 0.0 };
    let precision = ratio(tp as f64, (tp + fp) as f64);
    let recall = ratio(tp as f64, (tp + fn_) as f64);
    let f1 = ratio(2.0 * precision * recall, precision + recall);
    Prf1 { precision, recall, f1 }
}

pub fn prf1(m: &MatchResult) -> Prf1 {
    prf1_counts(m.tp, m.fp, m.fn_)
}

/// `(MAE, RMSE)` over `(ground truth count, predicted count)` pairs.
pub fn counting_errors(counts: &[(usize, usize)]) -> Result<(f64, f64)> {
    if counts.is_empty() {
        return Err(Error::invalid("counting_errors", "no images"));
    }
    let n = counts.len() as f64;
    let (mut abs, mut sq) = (0.0, 0.0);
    for &(y, yhat) in counts {
        let e = y as f64 - yhat as f64;
        abs += e.abs();
        sq += e * e;
    }
    Ok((abs / n, (sq / n).sqrt()))
}

/// Dataset-dependent strict and lenient thresholds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SigmaPreset {
    pub strict: f64,
    pub lenient: f64,
}

impl SigmaPreset {
    /// Crowd datasets.
    pub const CROWD: Self = Self {
        strict: 4.0,
        lenient: 8.0,
    };
    /// Everything else.
    pub const GENERAL: Self = Self {
        strict: 5.0,
        lenient: 10.0,
    };

    pub fn sigmas(&self) -> [f64; 2] {
        [self.strict, self.lenient]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdBlock {
    pub sigma: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub scores: Prf1,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageCounts {
    pub image_id: String,
    pub gt: usize,
    pub pred: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub thresholds: Vec<ThresholdBlock>,
    pub mae: f64,
    pub rmse: f64,
    pub images: Vec<ImageCounts>,
}

impl MetricsReport {
    pub fn n_images(&self) -> usize {
        self.images.len()
    }

    pub fn at(&self, sigma: f64) -> Option<&ThresholdBlock> {
        self.thresholds.iter().find(|b| b.sigma == sigma)
    }

    /// Key/value text with one block per threshold.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "images = {}", self.n_images()).unwrap();
        writeln!(s, "mae = {:.6}", self.mae).unwrap();
        writeln!(s, "rmse = {:.6}", self.rmse).unwrap();
        for b in &self.thresholds {
            writeln!(s, "\n[threshold sigma = {}]", b.sigma).unwrap();
            writeln!(s, "tp = {}", b.tp).unwrap();
            writeln!(s, "fp = {}", b.fp).unwrap();
            writeln!(s, "fn = {}", b.fn_).unwrap();
            writeln!(s, "precision = {:.6}", b.scores.precision).unwrap();
            writeln!(s, "recall = {:.6}", b.scores.recall).unwrap();
            writeln!(s, "f1 = {:.6}", b.scores.f1).unwrap();
        }
        s
    }

    /// Flat table: one row per threshold.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("sigma\ttp\tfp\tfn\tprecision\trecall\tf1\tmae\trmse\timages\n");
        for b in &self.thresholds {
            writeln!(
                s,
                "{}\t{}\t{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{}",
                b.sigma,
                b.tp,
                b.fp,
                b.fn_,
                b.scores.precision,
                b.scores.recall,
                b.scores.f1,
                self.mae,
                self.rmse,
                self.n_images()
            )
            .unwrap();
        }
        s
    }
}

/// Accumulates per-image matches into a [`MetricsReport`]. Counts are summed
/// over images before the rates are computed.
#[derive(Debug, Clone)]
pub struct Evaluator {
    sigmas: Vec<f64>,
    totals: Vec<(usize, usize, usize)>,
    images: Vec<ImageCounts>,
}

impl Evaluator {
    pub fn new(sigmas: &[f64]) -> Result<Self> {
        if sigmas.is_empty() || sigmas.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::invalid("evaluator", format!("bad sigma list {sigmas:?}")));
        }
        Ok(Self {
            sigmas: sigmas.to_vec(),
            totals: vec![(0, 0, 0); sigmas.len()],
            images: Vec::new(),
        })
    }

    pub fn add(&mut self, pred: &PointSet, gt: &PointSet) -> Result<()> {
        for (sigma, tot) in self.sigmas.iter().zip(&mut self.totals) {
            let m = match_points(&pred.points, &gt.points, *sigma)?;
            tot.0 += m.tp;
            tot.1 += m.fp;
            tot.2 += m.fn_;
        }
        self.images.push(ImageCounts {
            image_id: gt.image_id.clone(),
            gt: gt.points.len(),
            pred: pred.points.len(),
        });
        Ok(())
    }

    pub fn report(&self) -> Result<MetricsReport> {
        let counts: Vec<(usize, usize)> = self.images.iter().map(|c| (c.gt, c.pred)).collect();
        let (mae, rmse) = counting_errors(&counts)?;
        Ok(MetricsReport {
            thresholds: self
                .sigmas
                .iter()
                .zip(&self.totals)
                .map(|(&sigma, &(tp, fp, fn_))| ThresholdBlock {
                    sigma,
                    tp,
                    fp,
                    fn_,
                    scores: prf1_counts(tp, fp, fn_),
                })
                .collect(),
            mae,
            rmse,
            images: self.images.clone(),
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CsvRow {
    image_id: String,
    x: f64,
    y: f64,
}

/// Writes point sets as CSV with header `image_id,x,y`.
pub fn write_points_csv(sets: &[PointSet], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for s in sets {
        for p in &s.points {
            w.serialize(CsvRow {
                image_id: s.image_id.clone(),
                x: p.x,
                y: p.y,
            })
            .map_err(|e| csv_error(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads `image_id,x,y` rows, grouping consecutive rows by image id.
pub fn read_points_csv(path: &Path) -> Result<Vec<PointSet>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut sets: Vec<PointSet> = Vec::new();
    for row in r.deserialize::<CsvRow>() {
        let row = row.map_err(|e| csv_error(path, e))?;
        match sets.last_mut() {
            Some(s) if s.image_id == row.image_id => s.points.push(Point::new(row.x, row.y)),
            _ => sets.push(PointSet::new(row.image_id, vec![Point::new(row.x, row.y)])),
        }
    }
    Ok(sets)
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::Format {
        format: "csv",
        detail: format!("{}: {e}", path.display()),
    }
}
