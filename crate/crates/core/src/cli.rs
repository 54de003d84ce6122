//! Run configuration and the `train`, `eval`, `predict`, `verify` and
//! `synth` workflows behind the `fsol` binary.
//!
//! A run is described by a flat `key = value` document. Values come from the
//! built-in defaults, then an optional config file, then command-line
//! overrides; the merged result is written to `resolved_config.txt` in the
//! output directory.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{load_annotations, split_episodes, synth_dataset, Episode, Protocol, Shape, Split, Splits, SynthConfig};
use crate::error::{Error, Result};
use crate::locmap::{read_pgm16, write_pgm16, DecoderConfig, GtEncoder, ThresholdMode};
use crate::metrics::{write_points_csv, Evaluator, MetricsReport, PointSet};
use crate::model::train::{evaluate, fit, map_parallel, predict_episode, EpochLog};
use crate::model::{checkpoint, Ablation, AdamConfig, BBox, BackboneConfig, Fsol, ModelConfig, SqResidual, StageSpec, TrainConfig};
use crate::tensor::{DType, Scalar, Tensor};
use crate::verify;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// `f64` or `f32`.
    pub precision: String,
    pub out_dir: PathBuf,
    pub jobs: usize,

    /// `synth` for generated scenes, `annotations` for an annotated image folder.
    pub dataset: String,
    pub data_root: PathBuf,
    /// Annotation document; relative paths resolve against `data_root`.
    pub annotations: PathBuf,
    pub resolution: usize,
    /// `class_disjoint` or `random`.
    pub split: String,
    pub split_weights: Vec<f64>,

    pub synth_train_shapes: Vec<String>,
    pub synth_novel_shapes: Vec<String>,
    pub synth_train_per_class: usize,
    pub synth_val_per_class: usize,
    pub synth_test_per_class: usize,
    pub synth_count_min: usize,
    pub synth_count_max: usize,
    pub synth_size_min: f64,
    pub synth_size_max: f64,
    pub synth_min_center_distance: f64,
    pub synth_intensity_jitter: f64,
    pub synth_noise: f64,

    pub stem_channels: usize,
    pub stage_channels: Vec<usize>,
    pub projection: usize,
    pub extra_convs: usize,
    pub head_widths: Vec<usize>,
    pub theta: f64,
    pub leaky_slope: f64,
    /// `transformed` or `raw`.
    pub sq_residual: String,
    pub use_dc: bool,
    pub use_ccdc: bool,
    pub use_sq: bool,

    pub lr: f64,
    pub decay_factor: f64,
    pub decay_every: usize,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// `fidt` or `gaussian`.
    pub encoder: String,
    pub fidt_alpha: f64,
    pub fidt_beta: f64,
    pub fidt_c0: f64,
    pub gaussian_sigma: f64,

    pub threshold: f64,
    pub threshold_floor: f64,
    /// `relative` or `absolute`.
    pub threshold_mode: String,
    pub sigmas: Vec<f64>,
    pub select_sigma: f64,

    pub checkpoint: PathBuf,
    /// Split evaluated by `eval`.
    pub eval_split: String,
    /// When set, `eval` scores the PGM maps in this folder instead of running
    /// the model.
    pub maps_dir: PathBuf,
    pub dump_points: bool,
    pub dump_maps: bool,

    pub image: PathBuf,
    /// Exemplar box for `predict`, in the pixels of `image`.
    pub exemplar: Vec<f64>,

    /// Smaller trial counts for `verify`.
    pub quick: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::desk();
        let train = TrainConfig::desk();
        let synth = SynthConfig::default();
        let dec = DecoderConfig::default();
        let GtEncoder::Fidt { alpha, beta, c0 } = GtEncoder::default() else {
            unreachable!()
        };
        Self {
            seed: 0,
            precision: "f64".into(),
            out_dir: "runs/latest".into(),
            jobs: 1,
            dataset: "synth".into(),
            data_root: PathBuf::new(),
            annotations: "annotations.json".into(),
            resolution: 64,
            split: "class_disjoint".into(),
            split_weights: vec![1.0, 1.0, 1.0],
            synth_train_shapes: vec!["disc".into(), "square".into()],
            synth_novel_shapes: vec!["triangle".into()],
            synth_train_per_class: 16,
            synth_val_per_class: 4,
            synth_test_per_class: 8,
            synth_count_min: synth.count_min,
            synth_count_max: synth.count_max,
            synth_size_min: synth.size_min,
            synth_size_max: synth.size_max,
            synth_min_center_distance: synth.min_center_distance,
            synth_intensity_jitter: synth.intensity_jitter,
            synth_noise: synth.noise,
            stem_channels: model.backbone.stem.channels,
            stage_channels: model.backbone.stages.iter().map(|s| s.channels).collect(),
            projection: model.backbone.projection,
            extra_convs: model.backbone.extra_convs,
            head_widths: model.head_widths.clone(),
            theta: model.theta,
            leaky_slope: model.leaky_slope,
            sq_residual: "transformed".into(),
            use_dc: true,
            use_ccdc: true,
            use_sq: true,
            lr: train.lr,
            decay_factor: train.decay_factor,
            decay_every: train.decay_every,
            epochs: train.epochs,
            beta1: train.adam.beta1,
            beta2: train.adam.beta2,
            adam_eps: train.adam.eps,
            encoder: "fidt".into(),
            fidt_alpha: alpha,
            fidt_beta: beta,
            fidt_c0: c0,
            gaussian_sigma: 2.0,
            threshold: dec.threshold,
            threshold_floor: dec.floor,
            threshold_mode: "relative".into(),
            sigmas: vec![5.0, 10.0],
            select_sigma: 10.0,
            checkpoint: PathBuf::new(),
            eval_split: "test".into(),
            maps_dir: PathBuf::new(),
            dump_points: true,
            dump_maps: true,
            image: PathBuf::new(),
            exemplar: Vec::new(),
            quick: false,
        }
    }
}

impl RunConfig {
    /// Every config key.
    pub fn keys() -> Vec<String> {
        match toml::Value::try_from(RunConfig::default()).expect("defaults serialize") {
            toml::Value::Table(t) => t.keys().cloned().collect(),
            _ => unreachable!(),
        }
    }

    /// Defaults, overlaid with `file` (when given), overlaid with
    /// `overrides`. Override values are parsed as TOML values and fall back
    /// to plain strings.
    pub fn resolve(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut table = match toml::Value::try_from(RunConfig::default()).expect("defaults serialize") {
            toml::Value::Table(t) => t,
            _ => unreachable!(),
        };
        if let Some(path) = file {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let doc: toml::Table = text
                .parse()
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            for (k, v) in doc {
                if !table.contains_key(&k) {
                    return Err(Error::Config(format!("{}: unknown key {k:?}", path.display())));
                }
                table.insert(k, v);
            }
        }
        for (k, raw) in overrides {
            if !table.contains_key(k) {
                return Err(Error::Config(format!("unknown key {k:?}")));
            }
            let value = format!("v = {raw}")
                .parse::<toml::Table>()
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| toml::Value::String(raw.clone()));
            table.insert(k.clone(), value);
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    fn validate(&self) -> Result<()> {
        self.dtype()?;
        self.model_config()?.validate()?;
        self.train_config()?.schedule()?;
        self.decoder()?.validate()?;
        if self.sigmas.is_empty() || self.sigmas.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Config(format!("bad sigmas {:?}", self.sigmas)));
        }
        self.eval_split()?;
        Ok(())
    }

    pub fn dtype(&self) -> Result<DType> {
        self.precision.parse()
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let sq_residual = match self.sq_residual.as_str() {
            "transformed" => SqResidual::Transformed,
            "raw" => SqResidual::Raw,
            other => return Err(Error::Config(format!("unknown sq_residual {other:?}"))),
        };
        let cfg = ModelConfig {
            backbone: BackboneConfig {
                stem: StageSpec {
                    channels: self.stem_channels,
                    stride: 2,
                },
                stages: self
                    .stage_channels
                    .iter()
                    .map(|&channels| StageSpec { channels, stride: 2 })
                    .collect(),
                projection: self.projection,
                extra_convs: self.extra_convs,
            },
            head_widths: self.head_widths.clone(),
            theta: self.theta,
            leaky_slope: self.leaky_slope,
            sq_residual,
            ablation: Ablation {
                use_dc: self.use_dc,
                use_ccdc: self.use_ccdc,
                use_sq: self.use_sq,
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn encoder(&self) -> Result<GtEncoder> {
        match self.encoder.as_str() {
            "fidt" => Ok(GtEncoder::Fidt {
                alpha: self.fidt_alpha,
                beta: self.fidt_beta,
                c0: self.fidt_c0,
            }),
            "gaussian" => Ok(GtEncoder::Gaussian {
                sigma: self.gaussian_sigma,
            }),
            other => Err(Error::Config(format!("unknown encoder {other:?}"))),
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        Ok(TrainConfig {
            lr: self.lr,
            decay_factor: self.decay_factor,
            decay_every: self.decay_every,
            epochs: self.epochs,
            seed: self.seed,
            adam: AdamConfig {
                beta1: self.beta1,
                beta2: self.beta2,
                eps: self.adam_eps,
            },
            encoder: self.encoder()?,
        })
    }

    pub fn decoder(&self) -> Result<DecoderConfig> {
        let mode = match self.threshold_mode.as_str() {
            "relative" => ThresholdMode::Relative,
            "absolute" => ThresholdMode::Absolute,
            other => return Err(Error::Config(format!("unknown threshold_mode {other:?}"))),
        };
        Ok(DecoderConfig {
            threshold: self.threshold,
            floor: self.threshold_floor,
            mode,
        })
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            canvas: self.resolution,
            count_min: self.synth_count_min,
            count_max: self.synth_count_max,
            size_min: self.synth_size_min,
            size_max: self.synth_size_max,
            min_center_distance: self.synth_min_center_distance,
            intensity_jitter: self.synth_intensity_jitter,
            noise: self.synth_noise,
            seed: self.seed,
        }
    }

    fn eval_split(&self) -> Result<Split> {
        match self.eval_split.as_str() {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown eval_split {other:?}"))),
        }
    }

    fn shapes(names: &[String]) -> Result<Vec<Shape>> {
        names.iter().map(|n| Shape::parse(n)).collect()
    }

    /// Train / val / test episodes. Synthetic data uses the training shapes
    /// for train and val and the novel shapes for test.
    pub fn episodes(&self) -> Result<(Splits, Vec<String>)> {
        let mut notes = Vec::new();
        let splits = match self.dataset.as_str() {
            "synth" => {
                let cfg = self.synth_config();
                let seen = Self::shapes(&self.synth_train_shapes)?;
                let novel = Self::shapes(&self.synth_novel_shapes)?;
                let tag = |mut v: Vec<Episode>, s: Split| {
                    v.iter_mut().for_each(|e| e.split = Some(s));
                    v
                };
                Splits {
                    train: tag(synth_dataset(&cfg, &seen, self.synth_train_per_class, 0)?, Split::Train),
                    val: tag(synth_dataset(&cfg, &seen, self.synth_val_per_class, 100_000)?, Split::Val),
                    test: tag(synth_dataset(&cfg, &novel, self.synth_test_per_class, 200_000)?, Split::Test),
                }
            }
            "annotations" => {
                let doc = self.data_root.join(&self.annotations);
                let report = load_annotations(&self.data_root, &doc, self.resolution)?;
                notes.extend(report.warnings);
                for (name, why) in &report.skipped {
                    notes.push(format!("skipped {name}: {why}"));
                }
                if !report.skipped.is_empty() {
                    notes.push(format!("{} records skipped", report.skipped.len()));
                }
                let w = &self.split_weights;
                if w.len() != 3 {
                    return Err(Error::Config("split_weights needs three values".into()));
                }
                let protocol = match self.split.as_str() {
                    "class_disjoint" => Protocol::ClassDisjoint {
                        train: w[0],
                        val: w[1],
                        test: w[2],
                    },
                    "random" => Protocol::RandomByImage {
                        train: w[0],
                        val: w[1],
                        test: w[2],
                    },
                    other => return Err(Error::Config(format!("unknown split {other:?}"))),
                };
                split_episodes(report.episodes, protocol, self.seed)?
            }
            other => return Err(Error::Config(format!("unknown dataset {other:?}"))),
        };
        Ok((splits, notes))
    }
}

fn prepare_out_dir(cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    let path = cfg.out_dir.join("resolved_config.txt");
    fs::write(&path, cfg.to_text()).map_err(|e| Error::io(path, e))
}

fn write(path: PathBuf, text: &str) -> Result<()> {
    fs::write(&path, text).map_err(|e| Error::io(path, e))
}

/// Trains, writes `checkpoint.bin` (best validation epoch) and
/// `train_log.tsv`. Returns the log.
pub fn cmd_train(cfg: &RunConfig, mut log: impl FnMut(&str)) -> Result<Vec<EpochLog>> {
    prepare_out_dir(cfg)?;
    let (splits, notes) = cfg.episodes()?;
    notes.iter().for_each(|n| log(n));
    match cfg.dtype()? {
        DType::F64 => train_typed::<f64>(cfg, &splits, log),
        DType::F32 => train_typed::<f32>(cfg, &splits, log),
    }
}

fn train_typed<T: Scalar>(cfg: &RunConfig, splits: &Splits, mut log: impl FnMut(&str)) -> Result<Vec<EpochLog>> {
    let model = Fsol::<T>::new(cfg.model_config()?, cfg.seed)?;
    let tc = cfg.train_config()?;
    log(&format!(
        "training on {} episodes, {} validation, {} parameters",
        splits.train.len(),
        splits.val.len(),
        model.params().numel()
    ));
    let outcome = fit(model, &splits.train, &splits.val, &tc, &cfg.decoder()?, cfg.select_sigma, |e| {
        log(&format!(
            "epoch {:>3}  lr {:.3e}  loss {:.6e}  val_f1 {}",
            e.epoch,
            e.lr,
            e.mean_loss,
            e.val_f1.map_or("-".into(), |f| format!("{f:.4}"))
        ))
    })?;
    let mut tsv = String::from("epoch\tlr\tloss\tval_f1\n");
    for e in &outcome.log {
        tsv.push_str(&format!(
            "{}\t{:e}\t{:e}\t{}\n",
            e.epoch,
            e.lr,
            e.mean_loss,
            e.val_f1.map_or("".into(), |f| f.to_string())
        ));
    }
    write(cfg.out_dir.join("train_log.tsv"), &tsv)?;
    checkpoint::save(&outcome.best, &cfg.out_dir.join("checkpoint.bin"))?;
    log(&format!("kept epoch {}", outcome.best_epoch));
    Ok(outcome.log)
}

fn checkpoint_path(cfg: &RunConfig) -> PathBuf {
    if cfg.checkpoint.as_os_str().is_empty() {
        cfg.out_dir.join("checkpoint.bin")
    } else {
        cfg.checkpoint.clone()
    }
}

/// Scores one split; writes `metrics.txt`, `metrics.tsv` and optional
/// per-image point CSVs and map dumps.
pub fn cmd_eval(cfg: &RunConfig, mut log: impl FnMut(&str)) -> Result<MetricsReport> {
    prepare_out_dir(cfg)?;
    let (splits, notes) = cfg.episodes()?;
    notes.iter().for_each(|n| log(n));
    let episodes = splits.get(cfg.eval_split()?);
    if episodes.is_empty() {
        return Err(Error::invalid("eval", format!("split {:?} is empty", cfg.eval_split)));
    }
    let decoder = cfg.decoder()?;
    let (report, preds) = if !cfg.maps_dir.as_os_str().is_empty() {
        let preds = map_parallel(episodes, cfg.jobs, |ep| {
            let map = read_pgm16(&cfg.maps_dir.join(format!("{}.pgm", file_stem(&ep.id))))?;
            Ok(crate::model::Prediction {
                points: PointSet::new(ep.id.clone(), crate::locmap::decode_peaks(&map, &decoder)),
                map,
            })
        })?;
        let mut ev = Evaluator::new(&cfg.sigmas)?;
        for (ep, p) in episodes.iter().zip(&preds) {
            ev.add(&p.points, &ep.point_set())?;
        }
        (ev.report()?, preds)
    } else {
        match cfg.dtype()? {
            DType::F64 => eval_typed::<f64>(cfg, episodes, &decoder)?,
            DType::F32 => eval_typed::<f32>(cfg, episodes, &decoder)?,
        }
    };
    write(cfg.out_dir.join("metrics.txt"), &report.to_text())?;
    write(cfg.out_dir.join("metrics.tsv"), &report.to_tsv())?;
    dump(cfg, &preds)?;
    Ok(report)
}

fn eval_typed<T: Scalar>(
    cfg: &RunConfig,
    episodes: &[Episode],
    decoder: &DecoderConfig,
) -> Result<(MetricsReport, Vec<crate::model::Prediction>)> {
    let mut model = Fsol::<T>::new(cfg.model_config()?, cfg.seed)?;
    checkpoint::load_into(&mut model, &checkpoint_path(cfg))?;
    evaluate(&model, episodes, decoder, &cfg.sigmas, cfg.jobs)
}

fn file_stem(id: &str) -> String {
    id.rsplit_once('.').map_or(id, |(s, _)| s).replace(['/', '\\'], "_")
}

fn dump(cfg: &RunConfig, preds: &[crate::model::Prediction]) -> Result<()> {
    if cfg.dump_points {
        let dir = cfg.out_dir.join("points");
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for p in preds {
            write_points_csv(std::slice::from_ref(&p.points), &dir.join(format!("{}.csv", file_stem(&p.points.image_id))))?;
        }
    }
    if cfg.dump_maps {
        let dir = cfg.out_dir.join("maps");
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for p in preds {
            write_pgm16(&p.map, &dir.join(format!("{}.pgm", file_stem(&p.points.image_id))))?;
        }
    }
    Ok(())
}

/// Localizes objects in one image given one exemplar box. Points are
/// reported in the pixel frame of the original image.
pub fn cmd_predict(cfg: &RunConfig) -> Result<PointSet> {
    prepare_out_dir(cfg)?;
    let b = &cfg.exemplar;
    if b.len() != 4 {
        return Err(Error::Config("exemplar needs [x1, y1, x2, y2]".into()));
    }
    let img = image::open(&cfg.image).map_err(|source| Error::Image {
        path: cfg.image.clone(),
        source,
    })?;
    let (w0, h0) = (img.width() as f64, img.height() as f64);
    let r = cfg.resolution;
    let rgb = img
        .resize_exact(r as u32, r as u32, image::imageops::FilterType::Triangle)
        .to_rgb8();
    let mut data = vec![0.0; 3 * r * r];
    for (x, y, px) in rgb.enumerate_pixels() {
        for c in 0..3 {
            data[(c * r + y as usize) * r + x as usize] = px[c] as f64 / 255.0;
        }
    }
    let (sx, sy) = (r as f64 / w0, r as f64 / h0);
    let id = cfg
        .image
        .file_name()
        .map_or("image".into(), |n| n.to_string_lossy().into_owned());
    let ep = Episode {
        id: id.clone(),
        image: Tensor::new(&[1, 3, r, r], data)?,
        exemplar: BBox::new(b[0], b[1], b[2], b[3]).scaled(sx, sy),
        points: Vec::new(),
        class: String::new(),
        split: None,
    };
    let decoder = cfg.decoder()?;
    let pred = match cfg.dtype()? {
        DType::F64 => {
            let mut m = Fsol::<f64>::new(cfg.model_config()?, cfg.seed)?;
            checkpoint::load_into(&mut m, &checkpoint_path(cfg))?;
            predict_episode(&m, &ep, &decoder)?
        }
        DType::F32 => {
            let mut m = Fsol::<f32>::new(cfg.model_config()?, cfg.seed)?;
            checkpoint::load_into(&mut m, &checkpoint_path(cfg))?;
            predict_episode(&m, &ep, &decoder)?
        }
    };
    dump(cfg, std::slice::from_ref(&pred))?;
    Ok(PointSet::new(
        id,
        pred.points.points.iter().map(|p| p.scaled(1.0 / sx, 1.0 / sy)).collect(),
    ))
}

/// Runs the self-check suites and writes `verify.txt`.
pub fn cmd_verify(cfg: &RunConfig) -> Result<verify::VerifyReport> {
    prepare_out_dir(cfg)?;
    let report = verify::run_all(cfg.seed, cfg.quick)?;
    write(cfg.out_dir.join("verify.txt"), &report.to_text())?;
    Ok(report)
}

/// Writes the configured synthetic episodes as PNG images plus an
/// annotation document readable by the annotation loader.
pub fn cmd_synth(cfg: &RunConfig) -> Result<usize> {
    prepare_out_dir(cfg)?;
    let synth = RunConfig {
        dataset: "synth".into(),
        ..cfg.clone()
    };
    let (splits, _) = synth.episodes()?;
    let mut doc = serde_json::Map::new();
    let mut n = 0;
    for ep in splits.train.iter().chain(&splits.val).chain(&splits.test) {
        let (h, w) = ep.resolution();
        let mut img = image::RgbImage::new(w as u32, h as u32);
        for (x, y, px) in img.enumerate_pixels_mut() {
            for c in 0..3 {
                let v = ep.image.get(&[0, c, y as usize, x as usize]);
                px[c] = (v * 255.0).round().clamp(0.0, 255.0) as u8;
            }
        }
        let name = format!("{}.png", ep.id);
        let path = cfg.out_dir.join(&name);
        img.save(&path).map_err(|source| Error::Image { path, source })?;
        let e = &ep.exemplar;
        doc.insert(
            name,
            serde_json::json!({
                "points": ep.points.iter().map(|p| [p.x, p.y]).collect::<Vec<_>>(),
                "boxes": [[e.x1, e.y1, e.x2, e.y2]],
                "class": ep.class,
            }),
        );
        n += 1;
    }
    write(
        cfg.out_dir.join("annotations.json"),
        &serde_json::to_string_pretty(&serde_json::Value::Object(doc)).expect("json"),
    )?;
    Ok(n)
}
