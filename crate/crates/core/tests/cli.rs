mod common;

use std::path::Path;
use std::process::Command;

use fsol::cli::{cmd_eval, cmd_synth, cmd_train, cmd_verify, RunConfig};
use fsol::data::load_annotations;
use fsol::locmap::{encode_location_map, write_pgm16, GtEncoder};
use fsol::metrics::counting_errors;

fn small(out: &Path, extra: &[(&str, &str)]) -> RunConfig {
    let mut o: Vec<(String, String)> = vec![
        ("out_dir".into(), format!("{:?}", out.to_str().unwrap())),
        ("synth_train_per_class".into(), "2".into()),
        ("synth_val_per_class".into(), "1".into()),
        ("synth_test_per_class".into(), "2".into()),
        ("dump_maps".into(), "false".into()),
    ];
    o.extend(extra.iter().map(|(k, v)| (k.to_string(), v.to_string())));
    RunConfig::resolve(None, &o).unwrap()
}

#[test]
fn train_writes_log_checkpoint_and_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path(), &[("epochs", "5")]);
    let log = cmd_train(&cfg, |_| {}).unwrap();
    assert_eq!(log.len(), 5);
    let tsv = std::fs::read_to_string(dir.path().join("train_log.tsv")).unwrap();
    assert_eq!(tsv.lines().count(), 6);
    assert!(dir.path().join("checkpoint.bin").exists());
    let again = RunConfig::resolve(Some(&dir.path().join("resolved_config.txt")), &[]).unwrap();
    assert_eq!(again, cfg);

    // The kept checkpoint scores the best logged validation F1.
    let best = log.iter().map(|e| e.val_f1.unwrap()).fold(f64::MIN, f64::max);
    let eval_dir = dir.path().join("eval");
    let ecfg = small(
        &eval_dir,
        &[
            ("eval_split", "\"val\""),
            ("sigmas", "[10.0]"),
            ("checkpoint", &format!("{:?}", dir.path().join("checkpoint.bin").to_str().unwrap())),
        ],
    );
    let rep = cmd_eval(&ecfg, |_| {}).unwrap();
    assert_eq!(rep.at(10.0).unwrap().scores.f1, best);

    // Same seed, same log.
    let dir2 = tempfile::tempdir().unwrap();
    let log2 = cmd_train(&small(dir2.path(), &[("epochs", "5")]), |_| {}).unwrap();
    assert_eq!(log, log2);
}

#[test]
fn unknown_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.toml");
    std::fs::write(&path, "epochs = 3\nlearning_rate = 0.1\n").unwrap();
    assert!(RunConfig::resolve(Some(&path), &[]).is_err());
    assert!(RunConfig::resolve(None, &[("nope".into(), "1".into())]).is_err());
    std::fs::write(&path, "epochs = 3\n").unwrap();
    let cfg = RunConfig::resolve(Some(&path), &[("epochs".into(), "4".into())]).unwrap();
    assert_eq!(cfg.epochs, 4);
}

/// Writes scenes with `cmd_synth` and returns a config that evaluates all of
/// them, read back through the annotation loader, against `maps`.
fn annotated(root: &Path, maps: &Path) -> RunConfig {
    let synth = small(root, &[]);
    assert_eq!(cmd_synth(&synth).unwrap(), 2 * 2 + 2 + 2);
    small(
        &root.join("eval"),
        &[
            ("dataset", "\"annotations\""),
            ("data_root", &format!("{:?}", root.to_str().unwrap())),
            ("split", "\"random\""),
            ("split_weights", "[0.0, 0.0, 1.0]"),
            ("maps_dir", &format!("{:?}", maps.to_str().unwrap())),
            ("dump_points", "false"),
        ],
    )
}

#[test]
fn ground_truth_maps_score_perfectly() {
    let dir = tempfile::tempdir().unwrap();
    let maps = dir.path().join("maps");
    std::fs::create_dir_all(&maps).unwrap();
    let cfg = annotated(dir.path(), &maps);
    let rep = load_annotations(dir.path(), &dir.path().join("annotations.json"), 64).unwrap();
    for ep in &rep.episodes {
        let m = encode_location_map(&ep.points, (64, 64), &GtEncoder::default()).unwrap();
        write_pgm16(&m, &maps.join(ep.id.replace(".png", ".pgm"))).unwrap();
    }
    let report = cmd_eval(&cfg, |_| {}).unwrap();
    assert_eq!(report.n_images(), 8);
    assert_eq!(report.at(10.0).unwrap().scores.f1, 1.0);
    assert_eq!(report.at(5.0).unwrap().scores.f1, 1.0);
    assert_eq!((report.mae, report.rmse), (0.0, 0.0));
    let text = std::fs::read_to_string(dir.path().join("eval/metrics.txt")).unwrap();
    assert!(text.contains("[threshold sigma = 5]") && text.contains("[threshold sigma = 10]"));
    assert!(dir.path().join("eval/metrics.tsv").exists());
}

#[test]
fn removing_an_image_updates_n_and_mae() {
    let dir = tempfile::tempdir().unwrap();
    let maps = dir.path().join("maps");
    std::fs::create_dir_all(&maps).unwrap();
    let cfg = annotated(dir.path(), &maps);
    let rep = load_annotations(dir.path(), &dir.path().join("annotations.json"), 64).unwrap();
    // Drop one annotation per image so predicted counts are off by one or more.
    for (i, ep) in rep.episodes.iter().enumerate() {
        let keep = &ep.points[..ep.points.len() - 1 - (i % 2)];
        let m = encode_location_map(keep, (64, 64), &GtEncoder::default()).unwrap();
        write_pgm16(&m, &maps.join(ep.id.replace(".png", ".pgm"))).unwrap();
    }
    let before = cmd_eval(&cfg, |_| {}).unwrap();
    assert!(before.mae > 0.0);

    let doc_path = dir.path().join("annotations.json");
    let mut doc: serde_json::Map<String, serde_json::Value> =
        serde_json::from_str(&std::fs::read_to_string(&doc_path).unwrap()).unwrap();
    let victim = before.images[0].image_id.clone();
    doc.remove(&victim);
    std::fs::write(&doc_path, serde_json::Value::Object(doc).to_string()).unwrap();
    let after = cmd_eval(&cfg, |_| {}).unwrap();

    assert_eq!(after.n_images(), before.n_images() - 1);
    let rest: Vec<(usize, usize)> = before
        .images
        .iter()
        .filter(|c| c.image_id != victim)
        .map(|c| (c.gt, c.pred))
        .collect();
    let (mae, rmse) = counting_errors(&rest).unwrap();
    assert!((after.mae - mae).abs() < 1e-12);
    assert!((after.rmse - rmse).abs() < 1e-12);
}

#[test]
fn quick_verify_passes_and_reports_every_suite() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path(), &[("quick", "true")]);
    let rep = cmd_verify(&cfg).unwrap();
    assert!(rep.passed(), "{}", rep.to_text());
    let text = std::fs::read_to_string(dir.path().join("verify.txt")).unwrap();
    for op in ["conv2d", "deform_conv2d", "ccdc_hv", "corr2d_depthwise", "conv3d_dual", "matching", "pipeline"] {
        assert!(text.contains(op), "{op} missing from\n{text}");
    }
    assert!(text.lines().filter(|l| l.contains("grad ")).all(|l| l.contains("max error")));
}

#[test]
fn padding_mutation_is_caught_by_the_conv_oracle() {
    use fsol::kernels::{conv2d::forward, Conv2dGeometry};
    let mut r = common::rng(50);
    let x = common::rand_tensor(&mut r, &[1, 2, 6, 6]);
    let w = common::rand_tensor(&mut r, &[2, 2, 3, 3]);
    let good = forward(&x, &w, None, Conv2dGeometry { stride: 1, padding: 1 }).unwrap();
    assert!(common::max_abs(&good, &common::conv2d(&x, &w, None, 1, 1)) < 1e-12);
    // Off-by-one padding: pad 2 and crop back to the same extent.
    let wide = forward(&x, &w, None, Conv2dGeometry { stride: 1, padding: 2 }).unwrap();
    let shifted = fsol::tensor::Tensor::from_fn(&[1, 2, 6, 6], |i| wide.get(&[0, i[1], i[2], i[3]])).unwrap();
    assert!(common::max_abs(&shifted, &common::conv2d(&x, &w, None, 1, 1)) > 1e-3);
}

#[test]
fn binary_runs_quick_verify_and_rejects_bad_flags() {
    let dir = tempfile::tempdir().unwrap();
    let bin = env!("CARGO_BIN_EXE_fsol");
    let out = Command::new(bin)
        .args(["verify", "--quick", "true", "--out-dir"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("0 failed"));

    let out = Command::new(bin).args(["eval", "--epochs", "abc"]).output().unwrap();
    assert!(!out.status.success());
    let out = Command::new(bin).args(["train", "--no-such-flag", "1"]).output().unwrap();
    assert!(!out.status.success());
}

#[test]
fn no_sq_eval_of_full_checkpoint_reports_the_difference() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path(), &[("epochs", "1")]);
    cmd_train(&cfg, |_| {}).unwrap();
    let bin = env!("CARGO_BIN_EXE_fsol");
    let out = Command::new(bin)
        .args(["eval", "--no-sq", "--synth-test-per-class", "1", "--out-dir"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("unexpected tensor sq.in.weight [32, 32, 1, 1]"), "{err}");
}

#[test]
fn binary_train_smoke() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_fsol"))
        .args(["train", "--synth", "default", "--epochs", "5"])
        .args(["--synth-train-per-class", "1", "--synth-val-per-class", "1", "--out-dir"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let log = std::fs::read_to_string(dir.path().join("train_log.tsv")).unwrap();
    assert_eq!(log.lines().skip(1).count(), 5);
    assert!(dir.path().join("checkpoint.bin").exists());
    assert!(dir.path().join("resolved_config.txt").exists());
}
