//! Saves a model, loads it back at both precisions and predicts points on a
//! synthetic scene.

use fsol::data::{generate_scene, Shape, SynthConfig};
use fsol::locmap::DecoderConfig;
use fsol::model::{checkpoint, predict_episode, Fsol, ModelConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = std::env::temp_dir().join("fsol_example_ckpt");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("model.bin");

    let model = Fsol::<f32>::new(ModelConfig::desk(), 1)?;
    checkpoint::save(&model, &path)?;
    println!("{} parameters, {} bytes", model.params().numel(), std::fs::metadata(&path)?.len());

    let single: Fsol<f32> = checkpoint::load(&path)?;
    let double: Fsol<f64> = checkpoint::load(&path)?;
    let ep = generate_scene(&SynthConfig::default(), Shape::Square, 3)?;
    let decoder = DecoderConfig::default();
    let a = predict_episode(&single, &ep, &decoder)?;
    let b = predict_episode(&double, &ep, &decoder)?;
    println!("untrained: f32 predicts {} points, f64 predicts {}", a.points.points.len(), b.points.points.len());
    println!("annotated: {}", ep.points.len());
    Ok(())
}
