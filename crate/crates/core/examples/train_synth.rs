//! Trains the desk-scale model on synthetic discs and squares, then measures
//! localization F1 on held-out triangles.
//!
//! cargo run --release --example train_synth

use std::time::Instant;

use fsol::data::{synth_dataset, Shape, SynthConfig};
use fsol::locmap::DecoderConfig;
use fsol::model::{evaluate, fit, Fsol, ModelConfig, TrainConfig};

fn main() -> fsol::Result<()> {
    let synth = SynthConfig::default();
    let train = synth_dataset(&synth, &[Shape::Disc, Shape::Square], 16, 0)?;
    let novel = synth_dataset(&synth, &[Shape::Triangle], 8, 1000)?;
    let cfg = TrainConfig::desk();
    let decoder = DecoderConfig::default();
    let model = Fsol::<f64>::new(ModelConfig::desk(), cfg.seed)?;
    let start = Instant::now();
    let out = fit(model, &train, &[], &cfg, &decoder, 10.0, |e| {
        println!("epoch {:2}  lr {:.2e}  loss {:.6}", e.epoch, e.lr, e.mean_loss);
    })?;
    println!("{} steps in {:.1?}", out.steps, start.elapsed());
    for (name, eps) in [("train", &train), ("novel", &novel)] {
        let (report, _) = evaluate(&out.best, eps, &decoder, &[10.0], 4)?;
        let b = &report.thresholds[0];
        println!(
            "{name}: F1@10 {:.3}  P {:.3}  R {:.3}  MAE {:.2}",
            b.scores.f1, b.scores.precision, b.scores.recall, report.mae
        );
    }
    Ok(())
}
