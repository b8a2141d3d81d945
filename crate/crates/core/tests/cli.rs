//! The `colorista` binary: exit codes, dry runs and a small end-to-end run.

mod common;

use std::path::Path;
use std::process::{Command, Output};

use candle_core::DType;
use colorista::encoder::EncoderWeights;
use colorista::train::Trainer;

fn colorista(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_colorista")).args(args).output().unwrap()
}

fn code(args: &[&str]) -> i32 {
    colorista(args).status.code().unwrap()
}

fn frames(dir: &Path, n: usize) {
    std::fs::create_dir_all(dir).unwrap();
    for (t, f) in common::moving_clip(24, 16, n, 1, 60).iter().enumerate() {
        f.save_png(dir.join(format!("{t:04}.png"))).unwrap();
    }
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(code(&[]), 2);
    assert_eq!(code(&["stylize", "--input", "a", "--output", "b", "--style", "s.png"]), 2);
    let base = ["stylize", "--input", "a", "--output", "b", "--checkpoint", "c", "--style", "s.png"];
    assert_eq!(code(&[&base[..], &["--lambda", "1.5"]].concat()), 2);
    assert_eq!(code(&[&base[..], &["--lambda", "-0.1"]].concat()), 2);
    assert_eq!(code(&[&base[..], &["--whiten", "4"]].concat()), 2);
    assert_eq!(code(&[&base[..], &["--consecutive", "0"]].concat()), 2);
    assert_eq!(code(&[&base[..], &["--smooth-kernel", "0"]].concat()), 2);
    assert_eq!(code(&[&base[..], &["--temporal-mode", "sideways"]].concat()), 2);
    assert_eq!(code(&["stylize", "--input", "a", "--output", "b", "--checkpoint", "c", "--style", "s.png,t.png"]), 2);
    assert_eq!(code(&["remove-style", "--input", "a", "--output", "b", "--checkpoint", "c"]), 2);
    assert_eq!(code(&["eval"]), 2);
    assert_eq!(code(&["--help"]), 0);
}

#[test]
fn dry_run_prints_the_resolved_job() {
    let out = colorista(&[
        "stylize", "--input", "in", "--output", "out", "--checkpoint", "c.safetensors", "--style", "a.png,b.png@12",
        "--lambda", "0.25", "--temporal-mode", "no_flow", "--dry-run",
    ]);
    assert_eq!(out.status.code(), Some(0));
    let job: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(job["plan"]["lambda"], 0.25);
    assert_eq!(job["plan"]["styles"][1]["start"], 12);
    assert_eq!(job["plan"]["smooth_kernel"], 20);
    assert_eq!(job["temporal_mode"], "no_flow");
}

#[test]
fn runtime_failures_exit_with_three() {
    let dir = tempfile::tempdir().unwrap();
    frames(&dir.path().join("in"), 2);
    let missing = dir.path().join("missing.safetensors");
    let (input, output) = (dir.path().join("in"), dir.path().join("out"));
    let args = [
        "stylize", "--input", input.to_str().unwrap(), "--output", output.to_str().unwrap(),
        "--checkpoint", missing.to_str().unwrap(), "--style", "s.png",
    ];
    let out = colorista(&args);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.safetensors"));
}

#[test]
fn train_stylize_and_eval_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    frames(&d.join("content/v0"), 5);
    std::fs::create_dir_all(d.join("styles")).unwrap();
    common::scene(24, 24, 61).save_png(d.join("styles/s.png")).unwrap();
    let config = serde_json::json!({
        "epochs": 1, "steps_per_epoch": 1, "crop": 16, "seed": 2,
        "network": { "decoder_widths": [16, 32, 64, 128], "lstm_hidden": [16, 32, 64, 128] },
        "content_root": d.join("content"), "style_root": d.join("styles"), "output_dir": d.join("run"),
    });
    std::fs::write(d.join("train.json"), config.to_string()).unwrap();
    let cfg = d.join("train.json");
    assert_eq!(code(&["train", "--config", cfg.to_str().unwrap(), "--dry-run"]), 0);
    assert_eq!(code(&["train", "--config", cfg.to_str().unwrap()]), 0);
    let ckpt = d.join("run/checkpoint_latest.safetensors");
    assert!(ckpt.exists() && d.join("run/metrics.csv").exists());

    let out_dir = d.join("stylized");
    let s = |p: &Path| p.to_str().unwrap().to_owned();
    let run = colorista(&[
        "stylize", "--input", &s(&d.join("content/v0")), "--output", &s(&out_dir), "--checkpoint", &s(&ckpt),
        "--style", &s(&d.join("styles/s.png")),
    ]);
    assert_eq!(run.status.code(), Some(0), "{}", String::from_utf8_lossy(&run.stderr));
    assert!(out_dir.join("0004.png").exists());

    let manifest = serde_json::json!([["content/v0/0000.png", "styles/s.png", "stylized/0000.png"]]);
    std::fs::write(d.join("pairs.json"), manifest.to_string()).unwrap();
    let report = d.join("report.json");
    let run = colorista(&["eval", "--pairs", &s(&d.join("pairs.json")), "--checkpoint", &s(&ckpt), "--out", &s(&report)]);
    assert_eq!(run.status.code(), Some(0), "{}", String::from_utf8_lossy(&run.stderr));
    let json: serde_json::Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    assert_eq!(json["pairs"].as_array().unwrap().len(), 1);
    assert_eq!(json["metadata"]["perceptual_weights"], "uncalibrated");
    assert!(String::from_utf8_lossy(&run.stdout).contains("SSIM"));
}

#[test]
fn eval_bench_reports_one_row_per_resolution() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("c.safetensors");
    let mut config = common::tiny_train_config(1);
    config.network = colorista::network::NetworkConfig { active_scales: vec![1, 2], ..config.network };
    Trainer::new(config, EncoderWeights::random(1, DType::F32).unwrap()).unwrap().save_checkpoint(&ckpt).unwrap();
    let report = dir.path().join("bench.json");
    let out = colorista(&[
        "eval", "--bench", "--checkpoint", ckpt.to_str().unwrap(), "--resolutions", "32x24,40x16,30x20",
        "--frames", "2", "--warmup", "1", "--temporal-mode", "no_flow", "--out", report.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let json: serde_json::Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    // 30x20 is not divisible by 8 and is skipped with a warning
    assert_eq!(json["timing"].as_array().unwrap().len(), 2);
    assert_eq!(json["metadata"]["warnings"].as_array().unwrap().len(), 1);
}
