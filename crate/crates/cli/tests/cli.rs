//! The `fplab` binary: verbs, output layout and exit codes.

use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"{
    "run_name": "cli",
    "seed": 3,
    "target": { "preset": "symmetric_pair" },
    "network": { "hidden": [8, 8], "embedding": { "width": 4, "min_freq": 1.0, "max_freq": 100.0 } },
    "train": { "epochs": 2, "batch_size": 32, "dataset_size": 128, "checkpoint_every": 1 },
    "sampler": { "n_steps": 20, "n_samples": 50 },
    "diagnostics": { "grid_points": 4, "n_mc": 8 },
    "metrics": { "n_real": 50 }
}"#;

fn fplab(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fplab"))
        .env("FPLAB_OUT", out)
        .args(args)
        .output()
        .unwrap()
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("config.json");
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_owned()
}

#[test]
fn full_pipeline_succeeds_with_exit_code_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    let run = tmp.path().join("cli");
    let ckpt = run.join("checkpoints/epoch_2.ckpt");
    let ckpt = ckpt.to_str().unwrap();

    assert_eq!(fplab(tmp.path(), &["train", "-c", &cfg]).status.code(), Some(0));
    assert!(run.join("losses.csv").exists() && run.join("record_train.json").exists());
    assert_eq!(fplab(tmp.path(), &["sample", "-c", &cfg, "--ckpt", ckpt]).status.code(), Some(0));
    assert_eq!(fplab(tmp.path(), &["diagnose", "-c", &cfg, "--ckpt", ckpt]).status.code(), Some(0));
    assert_eq!(fplab(tmp.path(), &["target-dump", "-c", &cfg]).status.code(), Some(0));
    let real = run.join("target_samples.csv");
    let fake = run.join("samples.csv");
    let metrics = fplab(
        tmp.path(),
        &["metrics", "-c", &cfg, "--real", real.to_str().unwrap(), "--fake", fake.to_str().unwrap()],
    );
    assert_eq!(metrics.status.code(), Some(0));
    assert!(run.join("curves/rfp.csv").exists());
    assert!(run.join("report.json").exists());
}

#[test]
fn invalid_config_exits_with_two_and_names_the_field() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &TINY.replace(r#""epochs": 2"#, r#""epochs": 0"#));
    let out = fplab(tmp.path(), &["train", "-c", &cfg]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("epochs"));
}

#[test]
fn diverged_training_exits_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    let text = TINY.replace(r#""epochs": 2,"#, r#""epochs": 2, "lr": 1e300,"#);
    let cfg = write_config(tmp.path(), &text);
    let out = fplab(tmp.path(), &["train", "-c", &cfg]);
    assert_eq!(out.status.code(), Some(1));
    assert!(tmp.path().join("cli/record_train.json").exists());
}

#[test]
fn network_source_without_checkpoint_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    assert_eq!(fplab(tmp.path(), &["sample", "-c", &cfg]).status.code(), Some(2));
}
