//! Training step, epoch loop and evaluation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::net::Fsol;
use super::optim::{Adam, AdamConfig, StepDecay};
use crate::data::Episode;
use crate::error::{Error, Result};
use crate::locmap::{decode_peaks, encode_location_map, DecoderConfig, GtEncoder, LocationMap};
use crate::metrics::{Evaluator, MetricsReport, PointSet};
use crate::tensor::{GradTape, Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub decay_factor: f64,
    pub decay_every: usize,
    pub epochs: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    pub encoder: GtEncoder,
}

impl TrainConfig {
    /// Full-scale schedule: 2e-5, ×0.25 every 80 of 200 epochs.
    pub fn reference() -> Self {
        Self {
            lr: 2e-5,
            decay_factor: 0.25,
            decay_every: 80,
            epochs: 200,
            seed: 0,
            adam: AdamConfig::default(),
            encoder: GtEncoder::default(),
        }
    }

    /// CPU-scale schedule: the reference rate ×100 with the same decay
    /// factor, compressed to a handful of epochs.
    pub fn desk() -> Self {
        Self {
            lr: 2e-3,
            decay_every: 4,
            epochs: 9,
            ..Self::reference()
        }
    }

    pub fn schedule(&self) -> Result<StepDecay> {
        StepDecay::new(self.lr, self.decay_factor, self.decay_every)
    }
}

/// Encodes the ground-truth map of an episode at its image resolution.
pub fn gt_map(ep: &Episode, encoder: &GtEncoder) -> Result<LocationMap> {
    encode_location_map(&ep.points, ep.resolution(), encoder)
}

/// One forward / backward / update on a single episode. Returns the loss
/// before the update.
pub fn train_step<T: Scalar>(
    model: &mut Fsol<T>,
    opt: &mut Adam<T>,
    ep: &Episode,
    gt: &LocationMap,
    lr: f64,
) -> Result<f64> {
    let image: Tensor<T> = ep.image.cast();
    let mut tape = GradTape::new();
    let bound = model.params().bind(&mut tape);
    let trace = model.forward(&mut tape, &bound, &image, &ep.exemplar)?;
    let target = tape.constant(gt.to_tensor());
    let loss = tape.mse_loss(trace.map, target)?;
    let value = tape.value(loss).data()[0].as_f64();
    if !value.is_finite() {
        return Err(Error::NonFinite {
            what: format!("loss of episode {}", ep.id),
        });
    }
    tape.backward(loss)?;
    model.params_mut().zero_grad();
    model.params_mut().collect_grads(&tape, &bound)?;
    opt.step(model.params_mut(), lr);
    Ok(value)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
    /// F1 on the validation episodes at the selection threshold.
    pub val_f1: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub log: Vec<EpochLog>,
    /// Epoch whose parameters were kept.
    pub best_epoch: usize,
    pub best: Fsol<T>,
    pub steps: usize,
}

/// Trains for `cfg.epochs` passes over `train` in a seeded shuffled order.
/// With validation episodes, the epoch with the highest F1 at `select_sigma`
/// is kept; otherwise the last epoch.
pub fn fit<T: Scalar>(
    mut model: Fsol<T>,
    train: &[Episode],
    val: &[Episode],
    cfg: &TrainConfig,
    decoder: &DecoderConfig,
    select_sigma: f64,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome<T>> {
    if train.is_empty() {
        return Err(Error::invalid("train", "empty training split"));
    }
    let schedule = cfg.schedule()?;
    let gts = train.iter().map(|e| gt_map(e, &cfg.encoder)).collect::<Result<Vec<_>>>()?;
    let mut opt = Adam::new(model.params(), cfg.adam);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = Vec::new();
    let mut best: Option<(f64, usize, Fsol<T>)> = None;
    let mut steps = 0;
    for epoch in 0..cfg.epochs {
        let lr = schedule.lr(epoch);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &i in &order {
            total += train_step(&mut model, &mut opt, &train[i], &gts[i], lr)?;
            steps += 1;
        }
        let val_f1 = if val.is_empty() {
            None
        } else {
            let (report, _) = evaluate(&model, val, decoder, &[select_sigma], 1)?;
            Some(report.thresholds[0].scores.f1)
        };
        let entry = EpochLog {
            epoch,
            lr,
            mean_loss: total / train.len() as f64,
            val_f1,
        };
        on_epoch(&entry);
        let score = val_f1.unwrap_or(epoch as f64);
        if best.as_ref().map_or(true, |(s, _, _)| score > *s) {
            best = Some((score, epoch, model.clone()));
        }
        log.push(entry);
    }
    let (best_epoch, best) = match best {
        Some((_, e, m)) => (e, m),
        None => (0, model),
    };
    Ok(TrainOutcome {
        log,
        best_epoch,
        best,
        steps,
    })
}

/// Prediction for one episode.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub points: PointSet,
    pub map: LocationMap,
}

pub fn predict_episode<T: Scalar>(model: &Fsol<T>, ep: &Episode, decoder: &DecoderConfig) -> Result<Prediction> {
    let map = model.predict(&ep.image.cast(), &ep.exemplar)?;
    Ok(Prediction {
        points: PointSet::new(ep.id.clone(), decode_peaks(&map, decoder)),
        map,
    })
}

/// Predicts every episode, using up to `jobs` threads, and aggregates
/// metrics in episode order.
pub fn evaluate<T: Scalar>(
    model: &Fsol<T>,
    episodes: &[Episode],
    decoder: &DecoderConfig,
    sigmas: &[f64],
    jobs: usize,
) -> Result<(MetricsReport, Vec<Prediction>)> {
    decoder.validate()?;
    let preds = map_parallel(episodes, jobs, |ep| predict_episode(model, ep, decoder))?;
    let mut ev = Evaluator::new(sigmas)?;
    for (ep, p) in episodes.iter().zip(&preds) {
        ev.add(&p.points, &ep.point_set())?;
    }
    Ok((ev.report()?, preds))
}

/// Applies `f` to every item on up to `jobs` scoped threads, keeping input
/// order in the output.
pub fn map_parallel<I: Sync, O: Send>(items: &[I], jobs: usize, f: impl Fn(&I) -> Result<O> + Sync) -> Result<Vec<O>> {
    let jobs = jobs.max(1).min(items.len().max(1));
    if jobs == 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(jobs);
    let f = &f;
    let parts: Vec<Result<Vec<O>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| scope.spawn(move || c.iter().map(f).collect::<Result<Vec<O>>>()))
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(items.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}
