//! Location maps: ground-truth encoding from point annotations, local-maxima
//! decoding back to points, and 16-bit PGM dumps.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::Point;
use crate::tensor::{Scalar, Tensor};

/// Single-channel map at image resolution, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LocationMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl LocationMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || values.len() != height * width {
            return Err(Error::shape(
                "location_map",
                format!("{height}x{width} map with {} values", values.len()),
            ));
        }
        Ok(Self { height, width, values })
    }

    pub fn zeros(height: usize, width: usize) -> Result<Self> {
        Self::new(height, width, vec![0.0; height * width])
    }

    /// Reads a `1 × 1 × H × W` tensor.
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Result<Self> {
        match *t.shape() {
            [1, 1, h, w] => Self::new(h, w, t.data().iter().map(|v| v.as_f64()).collect()),
            _ => Err(Error::shape(
                "location_map",
                format!("expected 1x1xHxW, got {:?}", t.shape()),
            )),
        }
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::new(
            &[1, 1, self.height, self.width],
            self.values.iter().map(|&v| T::lit(v)).collect(),
        )
        .expect("extents are positive")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self {
            values: self.values.iter().map(|v| v * k).collect(),
            ..self.clone()
        }
    }
}

/// Ground-truth map encoder.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum GtEncoder {
    /// Focal inverse distance transform: `1 / (D^(αD+β) + C₀)` with `D` the
    /// Euclidean distance to the nearest annotated pixel.
    Fidt { alpha: f64, beta: f64, c0: f64 },
    /// `exp(−D² / 2σ²)`.
    Gaussian { sigma: f64 },
}

impl Default for GtEncoder {
    fn default() -> Self {
        GtEncoder::Fidt {
            alpha: 0.02,
            beta: 0.75,
            c0: 1.0,
        }
    }
}

impl GtEncoder {
    pub fn value_at_distance(&self, d: f64) -> f64 {
        match *self {
            GtEncoder::Fidt { alpha, beta, c0 } => 1.0 / (d.powf(alpha * d + beta) + c0),
            GtEncoder::Gaussian { sigma } => (-d * d / (2.0 * sigma * sigma)).exp(),
        }
    }
}

/// Integer pixel an annotation falls on.
pub fn annotated_pixel(p: Point, height: usize, width: usize) -> (usize, usize) {
    let x = ((p.x + 0.5).floor().max(0.0) as usize).min(width - 1);
    let y = ((p.y + 0.5).floor().max(0.0) as usize).min(height - 1);
    (x, y)
}

/// Squared distance transform of one row/column (lower envelope of
/// parabolas). `f` holds 0 at sites and `INF` elsewhere on the first pass.
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        if f[q] == f64::INFINITY {
            continue;
        }
        if f[v[0]] == f64::INFINITY {
            v[0] = q;
            continue;
        }
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s <= z[k] && k > 0 {
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = f64::INFINITY;
                break;
            }
        }
    }
    if f[v[0]] == f64::INFINITY {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut k = 0usize;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Exact squared Euclidean distance from every pixel to the nearest site.
pub fn squared_distance_transform(sites: &[(usize, usize)], height: usize, width: usize) -> Vec<f64> {
    let mut grid = vec![f64::INFINITY; height * width];
    for &(x, y) in sites {
        grid[y * width + x] = 0.0;
    }
    let n = height.max(width);
    let mut f = vec![0.0; n];
    let mut out = vec![0.0; n];
    let mut v = vec![0usize; n];
    let mut z = vec![0.0; n + 1];
    for x in 0..width {
        for y in 0..height {
            f[y] = grid[y * width + x];
        }
        edt_1d(&f[..height], &mut out[..height], &mut v, &mut z);
        for y in 0..height {
            grid[y * width + x] = out[y];
        }
    }
    for y in 0..height {
        f[..width].copy_from_slice(&grid[y * width..(y + 1) * width]);
        edt_1d(&f[..width], &mut out[..width], &mut v, &mut z);
        grid[y * width..(y + 1) * width].copy_from_slice(&out[..width]);
    }
    grid
}

/// Encodes annotated points as a location map of the given `(height, width)`.
pub fn encode_location_map(points: &[Point], hw: (usize, usize), encoder: &GtEncoder) -> Result<LocationMap> {
    let (h, w) = hw;
    let mut map = LocationMap::zeros(h, w)?;
    if points.is_empty() {
        return Ok(map);
    }
    let mut sites = Vec::with_capacity(points.len());
    for (i, p) in points.iter().enumerate() {
        if !(p.x.is_finite() && p.y.is_finite() && p.x >= 0.0 && p.y >= 0.0 && p.x < w as f64 && p.y < h as f64) {
            return Err(Error::invalid(
                "encode_location_map",
                format!("point {i} at ({}, {}) lies outside the {w}x{h} map", p.x, p.y),
            ));
        }
        sites.push(annotated_pixel(*p, h, w));
    }
    let d2 = squared_distance_transform(&sites, h, w);
    for (v, &dd) in map.values.iter_mut().zip(&d2) {
        *v = encoder.value_at_distance(dd.sqrt());
    }
    Ok(map)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ThresholdMode {
    /// Keep peaks above `T_a · max(map)`.
    Relative,
    /// Keep peaks above `T_a` itself.
    Absolute,
}

/// Local-maxima decoder settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub threshold: f64,
    pub floor: f64,
    pub mode: ThresholdMode,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            threshold: 100.0 / 255.0,
            floor: 0.06,
            mode: ThresholdMode::Relative,
        }
    }
}

impl DecoderConfig {
    /// Threshold for datasets of small, densely packed objects.
    pub fn dense() -> Self {
        Self {
            threshold: 40.0 / 255.0,
            ..Self::default()
        }
    }

    /// Threshold for datasets of larger, sparser objects.
    pub fn sparse() -> Self {
        Self {
            threshold: 60.0 / 255.0,
            ..Self::default()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "default" => Ok(Self::default()),
            "dense" => Ok(Self::dense()),
            "sparse" => Ok(Self::sparse()),
            other => Err(Error::Config(format!("unknown decoder preset {other:?}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold <= 1.0) {
            return Err(Error::Config(format!("decoder threshold {} outside (0, 1]", self.threshold)));
        }
        if !(self.floor >= 0.0 && self.floor < 1.0) {
            return Err(Error::Config(format!("decoder floor {} outside [0, 1)", self.floor)));
        }
        Ok(())
    }
}

/// Local-maxima detection over 3×3 neighbourhoods.
///
/// A pixel is kept when no neighbour is larger, it is the smallest `(x, y)`
/// among equal neighbours, and its value exceeds both the threshold and the
/// absolute floor.
pub fn decode_peaks(map: &LocationMap, cfg: &DecoderConfig) -> Vec<Point> {
    let (h, w) = (map.height, map.width);
    let cut = match cfg.mode {
        ThresholdMode::Relative => cfg.threshold * map.max(),
        ThresholdMode::Absolute => cfg.threshold,
    };
    let mut peaks = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let v = map.values[y * w + x];
            if !(v > cut && v > cfg.floor) {
                continue;
            }
            let mut is_peak = true;
            'nb: for ny in y.saturating_sub(1)..(y + 2).min(h) {
                for nx in x.saturating_sub(1)..(x + 2).min(w) {
                    if (nx, ny) == (x, y) {
                        continue;
                    }
                    let q = map.values[ny * w + nx];
                    if q > v || (q == v && (nx, ny) < (x, y)) {
                        is_peak = false;
                        break 'nb;
                    }
                }
            }
            if is_peak {
                peaks.push(Point::new(x as f64, y as f64));
            }
        }
    }
    peaks
}

/// Serialises a map as a binary 16-bit PGM (`P5`, maxval 65535, big-endian
/// samples). Values are clamped to `[0, 1]` and scaled by 65535.
pub fn to_pgm16(map: &LocationMap) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n65535\n", map.width, map.height).into_bytes();
    out.reserve(map.values.len() * 2);
    for &v in &map.values {
        let q = (v.clamp(0.0, 1.0) * 65535.0).round() as u16;
        out.extend_from_slice(&q.to_be_bytes());
    }
    out
}

pub fn from_pgm16(bytes: &[u8]) -> Result<LocationMap> {
    let bad = |detail: &str| Error::Format {
        format: "pgm",
        detail: detail.to_string(),
    };
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ascii header"))?);
    }
    if fields[0] != "P5" {
        return Err(bad("not a binary graymap"));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (w, h, maxval) = (parse(fields[1])?, parse(fields[2])?, parse(fields[3])?);
    if maxval != 65535 {
        return Err(bad("expected maxval 65535"));
    }
    pos += 1;
    let body = &bytes[pos.min(bytes.len())..];
    if body.len() != w * h * 2 {
        return Err(bad("sample count does not match the header"));
    }
    let values = body
        .chunks_exact(2)
        .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 / 65535.0)
        .collect();
    LocationMap::new(h, w, values)
}

pub fn write_pgm16(map: &LocationMap, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&to_pgm16(map)).map_err(|e| Error::io(path, e))
}

pub fn read_pgm16(path: &Path) -> Result<LocationMap> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_pgm16(&bytes)
}
