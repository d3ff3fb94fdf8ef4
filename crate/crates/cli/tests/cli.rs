use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn issl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_issl"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = issl(args);
    assert!(
        out.status.success(),
        "issl {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

/// A small rendered desk sequence.
fn synth(dir: &Path, frames: usize) -> PathBuf {
    let out = dir.join("seq");
    ok(&[
        "synth",
        "--preset",
        "desk",
        "--width",
        "32",
        "--height",
        "16",
        "--frames",
        &frames.to_string(),
        "--moving",
        "--out",
        s(&out),
    ]);
    out
}

#[test]
fn synth_writes_a_loadable_sequence() {
    let dir = tempfile::tempdir().unwrap();
    let seq = synth(dir.path(), 3);
    for f in [
        "000000.png",
        "000002_depth.pfm",
        "000001_instances.png",
        "sequence.json",
        "scene.json",
    ] {
        assert!(seq.join(f).exists(), "{f}");
    }
    let manifest = read_json(&seq.join("sequence.json"));
    assert_eq!(manifest["frames"].as_array().unwrap().len(), 3);
    assert!(manifest["intrinsics"]["fx"].as_f64().unwrap() > 0.0);

    // a scene file gives the same frames as the preset it came from
    let again = dir.path().join("again");
    ok(&[
        "synth",
        "--scene",
        s(&seq.join("scene.json")),
        "--out",
        s(&again),
    ]);
    assert_eq!(
        fs::read(seq.join("000001.png")).unwrap(),
        fs::read(again.join("000001.png")).unwrap()
    );
}

#[test]
fn dry_run_validates_without_writing() {
    let dir = tempfile::tempdir().unwrap();
    let seq = synth(dir.path(), 3);
    let out = dir.path().join("run");
    let stdout = ok(&["train", "--dataset", s(&seq), "--out", s(&out), "--dry-run"]);
    let v: Value = serde_json::from_str(&stdout).unwrap();
    assert_eq!(v["training_tuples"], 1);
    assert!(!out.exists());
}

#[test]
fn unknown_config_key_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"dataset": "x", "train": {"lambda_3": 1}}"#).unwrap();
    let out = issl(&["train", "--config", s(&cfg), "--dry-run"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(
        err.contains("lambda_3") && err.contains("cfg.json"),
        "{err}"
    );
}

#[test]
fn missing_files_and_bad_flags_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.pfm");
    let out = issl(&["eval", "--pred", s(&missing), "--gt", s(&missing)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.pfm"));

    assert_eq!(issl(&["train", "--epochs", "many"]).status.code(), Some(1));
    assert_eq!(issl(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(issl(&["--help"]).status.code(), Some(0));
}

#[test]
fn eval_of_ground_truth_is_error_free() {
    let dir = tempfile::tempdir().unwrap();
    let seq = synth(dir.path(), 2);
    let gt = seq.join("000000_depth.pfm");
    let out = dir.path().join("metrics.json");
    ok(&[
        "eval",
        "--pred",
        s(&gt),
        "--gt",
        s(&gt),
        "--instances",
        s(&seq.join("000000_instances.png")),
        "--out",
        s(&out),
    ]);
    let v = read_json(&out);
    for k in ["abs_rel", "sq_rel", "rms", "rms_log"] {
        assert_eq!(v["metrics"][k], 0.0, "{k}");
    }
    assert_eq!(v["metrics"]["a1"], 1.0);
    assert_eq!(v["metrics"]["scale_factor"], 1.0);
    assert_eq!(v["decomposition"]["dynamic"]["whole"]["abs_rel"], 0.0);
}

#[test]
fn empty_ground_truth_is_degenerate() {
    let dir = tempfile::tempdir().unwrap();
    let seq = synth(dir.path(), 2);
    let pred = seq.join("000000_depth.pfm");
    // every ground-truth pixel beyond the cap
    let out = issl(&[
        "eval",
        "--pred",
        s(&pred),
        "--gt",
        s(&pred),
        "--max-depth",
        "1",
    ]);
    assert_eq!(
        out.status.code(),
        Some(2),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn decompose_attributes_an_offset_to_translation() {
    let dir = tempfile::tempdir().unwrap();
    let seq = synth(dir.path(), 2);
    let out = dir.path().join("decomposition.json");
    ok(&[
        "decompose",
        "--pred",
        s(&seq.join("000001_depth.pfm")),
        "--gt",
        s(&seq.join("000001_depth.pfm")),
        "--instances",
        s(&seq.join("000001_instances.png")),
        "--out",
        s(&out),
    ]);
    let v = read_json(&out);
    assert_eq!(v["decomposition"]["static"]["shape"]["abs_rel"], 0.0);
    assert!(v["decomposition"]["static"]["translation"]["abs_rel"].is_number());
}

#[test]
fn warp_reports_validity_and_residual() {
    let dir = tempfile::tempdir().unwrap();
    let seq = dir.path().join("plane");
    ok(&[
        "synth",
        "--preset",
        "plane",
        "--width",
        "64",
        "--height",
        "32",
        "--frames",
        "2",
        "--out",
        s(&seq),
    ]);
    let k = dir.path().join("k.json");
    let manifest = read_json(&seq.join("sequence.json"));
    fs::write(&k, manifest["intrinsics"].to_string()).unwrap();
    let out = dir.path().join("warp");
    // frame 1 sits 0.1 m to the right of frame 0
    let stdout = ok(&[
        "warp",
        "--source",
        s(&seq.join("000001.png")),
        "--depth",
        s(&seq.join("000000_depth.pfm")),
        "--intrinsics",
        s(&k),
        "--motion",
        "0,0,0,-0.1,0,0",
        "--target",
        s(&seq.join("000000.png")),
        "--out",
        s(&out),
    ]);
    let v: Value = serde_json::from_str(&stdout).unwrap();
    assert!(v["residual"].as_f64().unwrap() < 0.01, "{v}");
    assert!(v["valid_fraction"].as_f64().unwrap() > 0.9);
    assert!(out.join("warped.png").exists() && out.join("valid.png").exists());

    let bad = issl(&[
        "warp",
        "--source",
        "a",
        "--depth",
        "b",
        "--intrinsics",
        s(&k),
        "--motion",
        "1,2",
        "--out",
        "c",
    ]);
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn selfsample_writes_every_sample() {
    let dir = tempfile::tempdir().unwrap();
    let seq = synth(dir.path(), 1);
    let k = dir.path().join("k.json");
    fs::write(
        &k,
        read_json(&seq.join("sequence.json"))["intrinsics"].to_string(),
    )
    .unwrap();
    let out = dir.path().join("samples");
    ok(&[
        "selfsample",
        "--image",
        s(&seq.join("000000.png")),
        "--depth",
        s(&seq.join("000000_depth.pfm")),
        "--intrinsics",
        s(&k),
        "--n-k",
        "3",
        "--epoch",
        "19",
        "--out",
        s(&out),
    ]);
    for i in 0..3 {
        for suffix in [".png", "_depth.pfm", "_valid.png"] {
            assert!(out.join(format!("sample_{i}{suffix}")).exists());
        }
    }
    let summary = read_json(&out.join("samples.json"));
    assert_eq!(summary["samples"].as_array().unwrap().len(), 3);
    assert_eq!(summary["theta_r"], 0.2);
}

#[test]
fn training_is_reproducible_from_run_json() {
    let dir = tempfile::tempdir().unwrap();
    let seq = synth(dir.path(), 4);
    let cfg = dir.path().join("cfg.json");
    fs::write(
        &cfg,
        format!(
            r#"{{"dataset": {:?}, "holdout": 1, "train": {{"epochs": 2, "steps_per_epoch": 2, "seed": 3,
                "sampler": {{"n_k": 2}}, "net": {{"widths": [4, 4, 4, 4]}}}}}}"#,
            s(&seq)
        ),
    )
    .unwrap();
    let first = dir.path().join("first");
    ok(&["train", "--config", s(&cfg), "--out", s(&first)]);
    for f in [
        "model.ckpt",
        "state.json",
        "losses.csv",
        "metrics.json",
        "run.json",
    ] {
        assert!(first.join(f).exists(), "{f}");
    }
    let csv = fs::read_to_string(first.join("losses.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "step,L_p,L_s,L_issl,total");
    assert_eq!(csv.lines().count(), 5);
    let metrics = read_json(&first.join("metrics.json"));
    assert_eq!(metrics.as_array().unwrap().len(), 2);
    let run = read_json(&first.join("run.json"));
    assert_eq!(run["config"]["train"]["seed"], 3);
    assert_eq!(run["version"], env!("CARGO_PKG_VERSION"));

    let second = dir.path().join("second");
    ok(&[
        "--threads",
        "2",
        "train",
        "--rerun",
        s(&first.join("run.json")),
        "--out",
        s(&second),
    ]);
    for f in ["model.ckpt", "losses.csv", "metrics.json"] {
        assert_eq!(
            fs::read(first.join(f)).unwrap(),
            fs::read(second.join(f)).unwrap(),
            "{f}"
        );
    }

    // the checkpoint predicts, and eval accepts it
    let stdout = ok(&[
        "eval",
        "--checkpoint",
        s(&first.join("model.ckpt")),
        "--image",
        s(&seq.join("000003.png")),
        "--gt",
        s(&seq.join("000003_depth.pfm")),
        "--post-process",
    ]);
    let v: Value = serde_json::from_str(&stdout).unwrap();
    assert!(v["metrics"]["abs_rel"].as_f64().unwrap().is_finite());
}

#[test]
fn gradcheck_passes() {
    let stdout = ok(&["gradcheck", "--seeds", "1"]);
    let last = stdout.lines().last().unwrap();
    assert!(last.starts_with("max rel. error"), "{last}");
    let err: f64 = last.split_whitespace().nth(3).unwrap().parse().unwrap();
    assert!(err < 1e-4);
}
