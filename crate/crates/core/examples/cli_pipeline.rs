//! The train, eval and predict subcommands driven from code on a small
//! synthetic split.
//!
//! cargo run --release --example cli_pipeline

use fsol::cli::{cmd_eval, cmd_predict, cmd_synth, cmd_train, RunConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::temp_dir().join("fsol_example_run");
    let overrides: Vec<(String, String)> = [
        ("out_dir", format!("{:?}", out.to_str().unwrap())),
        ("epochs", "3".into()),
        ("synth_train_per_class", "4".into()),
        ("synth_val_per_class", "2".into()),
        ("synth_test_per_class", "4".into()),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();
    let cfg = RunConfig::resolve(None, &overrides)?;

    for e in cmd_train(&cfg, |line| println!("{line}"))? {
        println!("epoch {} loss {:.5} val F1 {:?}", e.epoch, e.mean_loss, e.val_f1);
    }
    let report = cmd_eval(&cfg, |line| println!("{line}"))?;
    print!("{}", report.to_text());

    // Export the scenes as PNG files and localize in the first one.
    cmd_synth(&cfg)?;
    let doc: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("annotations.json"))?)?;
    let (name, rec) = doc.as_object().and_then(|m| m.iter().next()).expect("at least one scene");
    let mut more = overrides.clone();
    more.push(("image".into(), format!("{:?}", out.join(name).to_str().unwrap())));
    more.push(("exemplar".into(), rec["boxes"][0].to_string()));
    more.push(("checkpoint".into(), format!("{:?}", out.join("checkpoint.bin").to_str().unwrap())));
    let found = cmd_predict(&RunConfig::resolve(None, &more)?)?;
    println!("{name}: {} annotated, {} found", rec["points"].as_array().map_or(0, |a| a.len()), found.points.len());
    println!("outputs in {}", out.display());
    Ok(())
}
