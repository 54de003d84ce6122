//! Inspects the intermediate maps of an untrained desk model on one synthetic
//! episode: similarity, self-query weights and the predicted location map.

use fsol::data::{generate_scene, Shape, SynthConfig};
use fsol::model::{Fsol, ModelConfig};

fn stats(name: &str, v: &[f64]) {
    let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    println!("{name:<6} min {lo:>9.4}  mean {mean:>9.4}  max {hi:>9.4}");
}

fn main() -> fsol::Result<()> {
    let ep = generate_scene(&SynthConfig::default(), Shape::Disc, 0)?;
    let model = Fsol::<f64>::new(ModelConfig::desk(), 0)?;
    let f = model.features(&ep.image, &ep.exemplar)?;
    println!("query {:?}  support {:?}  similarity {:?}", f.fq.shape(), f.fs.shape(), f.s.shape());
    stats("S", f.s.data());
    if let Some(w) = &f.w {
        stats("W", w.data());
    }
    if let Some(s) = &f.s_sq {
        stats("S_SQ", s.data());
    }
    stats("map", f.map.data());
    Ok(())
}
