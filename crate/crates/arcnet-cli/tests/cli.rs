//! Black-box tests of the `arcnet` binary: exit codes, on-disk artifacts,
//! determinism of seeded commands.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_arcnet"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn arcnet")
}

fn assert_ok(out: &Output, what: &str) {
    assert!(
        out.status.success(),
        "{what} failed:\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn temp_dir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("arcnet-cli-{tag}-{}", std::process::id()));
    std::fs::remove_dir_all(&dir).ok();
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn write_phantom_config(dir: &Path, seed: u64, pullbacks: usize, frames: usize) -> PathBuf {
    let path = dir.join("phantom.json");
    std::fs::write(
        &path,
        format!(
            r#"{{"seed": {seed}, "pullbacks": {pullbacks}, "frames_per_pullback": {frames},
                "image_size": 64, "n_alines": 24}}"#
        ),
    )
    .unwrap();
    path
}

fn write_train_config(dir: &Path) -> PathBuf {
    let path = dir.join("train.json");
    std::fs::write(
        &path,
        r#"{
  "model": {"variant": "polar", "height": 64, "width": 64, "rho": 24, "theta": 24,
            "polar_channels": [8, 16, 32, 64], "cart_channels": [4, 8, 16, 32],
            "downsample": [2, 2, 2, 1], "n_classes": 3, "stack_depth": 3},
  "lr0": 0.001, "plateau_factor": 0.5, "plateau_patience": 5,
  "epochs": 2, "batches_per_epoch": 3, "batch_size": 2,
  "lambda_tv": 0.0005, "seed": 7, "augment": true
}"#,
    )
    .unwrap();
    path
}

fn tree_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                files.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    files.sort();
    files
}

#[test]
fn phantom_is_deterministic_and_sized() {
    let dir = temp_dir("phantom");
    let cfg = write_phantom_config(&dir, 9, 2, 4);
    let out_a = dir.join("a");
    let out_b = dir.join("b");
    for out in [&out_a, &out_b] {
        let o = run(&[
            "phantom",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_ok(&o, "phantom");
    }
    assert_eq!(
        tree_bytes(&out_a),
        tree_bytes(&out_b),
        "same seed, same tree"
    );

    // A different seed changes the frames.
    let out_c = dir.join("c");
    let o = run(&[
        "phantom",
        "--config",
        cfg.to_str().unwrap(),
        "--seed",
        "10",
        "--out",
        out_c.to_str().unwrap(),
    ]);
    assert_ok(&o, "phantom reseeded");
    assert_ne!(tree_bytes(&out_a), tree_bytes(&out_c));
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn phantom_manifest_lists_every_frame() {
    let dir = temp_dir("manifest");
    let cfg = write_phantom_config(&dir, 3, 1, 500);
    let out = dir.join("ds");
    let o = run(&[
        "phantom",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_ok(&o, "phantom 500");
    let manifest = std::fs::read_to_string(out.join("manifest.txt")).unwrap();
    assert_eq!(
        manifest.lines().filter(|l| l.starts_with("frame ")).count(),
        500
    );
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn zero_rate_config_gives_all_zero_labels() {
    let dir = temp_dir("zerorate");
    let cfg = dir.join("phantom.json");
    std::fs::write(
        &cfg,
        r#"{"seed": 1, "pullbacks": 1, "frames_per_pullback": 3, "image_size": 64,
            "n_alines": 24, "mild_rate": 0.0, "severe_rate": 0.0, "thrombus_rate": 0.0}"#,
    )
    .unwrap();
    let out = dir.join("ds");
    assert_ok(
        &run(&[
            "phantom",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]),
        "phantom zero-rate",
    );
    let labels = std::fs::read_to_string(out.join("PB000/labels.csv")).unwrap();
    assert!(labels.chars().all(|c| matches!(c, '0' | ',' | '\n')));
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn train_eval_infer_render_pipeline() {
    let dir = temp_dir("pipeline");
    let phantom_cfg = write_phantom_config(&dir, 5, 3, 4);
    let ds = dir.join("ds");
    assert_ok(
        &run(&[
            "phantom",
            "--config",
            phantom_cfg.to_str().unwrap(),
            "--out",
            ds.to_str().unwrap(),
        ]),
        "phantom",
    );
    let manifest = ds.join("manifest.txt");
    let train_cfg = write_train_config(&dir);
    let rundir = dir.join("run");
    let o = run(&[
        "train",
        "--manifest",
        manifest.to_str().unwrap(),
        "--config",
        train_cfg.to_str().unwrap(),
        "--out",
        rundir.to_str().unwrap(),
        "--val-fraction",
        "0.34",
    ]);
    assert_ok(&o, "train");
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(
        stdout.contains("parameters"),
        "parameter report missing: {stdout}"
    );
    assert!(rundir.join("best.ckpt").exists());
    assert!(rundir.join("last.ckpt").exists());
    let history = std::fs::read_to_string(rundir.join("history.tsv")).unwrap();
    assert_eq!(history.lines().count(), 2 + 2); // header lines + 2 epochs

    // Evaluate: report keys present, confusion rows sum to 100.
    let report_path = dir.join("report.txt");
    let o = run(&[
        "eval",
        "--manifest",
        manifest.to_str().unwrap(),
        "--checkpoint",
        rundir.join("best.ckpt").to_str().unwrap(),
        "--out",
        report_path.to_str().unwrap(),
    ]);
    assert_ok(&o, "eval");
    let report = std::fs::read_to_string(&report_path).unwrap();
    for key in [
        "balanced_accuracy:",
        "dice_mild_mean:",
        "dice_severe_mean:",
        "fscore_mild:",
        "fscore_severe:",
        "framewise_fscore_mild:",
        "framewise_fscore_severe:",
    ] {
        assert!(report.contains(key), "missing {key} in:\n{report}");
    }
    for line in report.lines().filter(|l| l.starts_with("confusion_")) {
        if line.contains("empty") {
            continue;
        }
        let nums: Vec<f64> = line
            .split_whitespace()
            .skip(1)
            .map(|t| t.parse().unwrap())
            .collect();
        let sum: f64 = nums.iter().sum();
        assert!(sum == 0.0 || (sum - 100.0).abs() < 0.01, "row {line}");
    }

    // Infer: one CSV per pullback, theta labels per row, timing printed.
    let preds = dir.join("preds");
    let o = run(&[
        "infer",
        "--manifest",
        manifest.to_str().unwrap(),
        "--checkpoint",
        rundir.join("best.ckpt").to_str().unwrap(),
        "--out",
        preds.to_str().unwrap(),
    ]);
    assert_ok(&o, "infer");
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("ms/frame"), "throughput missing: {stdout}");
    let csv = std::fs::read_to_string(preds.join("PB000_predictions.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    assert!(csv.lines().all(|l| l.split(',').count() == 24));

    // Render from the checkpoint and from the prediction CSV.
    let png_a = dir.join("overlay_model.png");
    let o = run(&[
        "render",
        "--manifest",
        manifest.to_str().unwrap(),
        "--checkpoint",
        rundir.join("best.ckpt").to_str().unwrap(),
        "--pullback",
        "PB000",
        "--frame",
        "1",
        "--out",
        png_a.to_str().unwrap(),
    ]);
    assert_ok(&o, "render");
    let bytes = std::fs::read(&png_a).unwrap();
    assert_eq!(&bytes[..8], b"\x89PNG\r\n\x1a\n");
    let png_b = dir.join("overlay_csv.png");
    let o = run(&[
        "render",
        "--manifest",
        manifest.to_str().unwrap(),
        "--checkpoint",
        rundir.join("best.ckpt").to_str().unwrap(),
        "--pullback",
        "PB000",
        "--frame",
        "1",
        "--predictions",
        preds.join("PB000_predictions.csv").to_str().unwrap(),
        "--out",
        png_b.to_str().unwrap(),
    ]);
    assert_ok(&o, "render from csv");
    // Same predictions either way, so the images agree byte for byte.
    assert_eq!(
        std::fs::read(&png_a).unwrap(),
        std::fs::read(&png_b).unwrap()
    );

    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn resume_continues_training() {
    let dir = temp_dir("resume");
    let phantom_cfg = write_phantom_config(&dir, 6, 3, 4);
    let ds = dir.join("ds");
    assert_ok(
        &run(&[
            "phantom",
            "--config",
            phantom_cfg.to_str().unwrap(),
            "--out",
            ds.to_str().unwrap(),
        ]),
        "phantom",
    );
    let manifest = ds.join("manifest.txt");
    let train_cfg = write_train_config(&dir);

    // Direct 3-epoch run.
    let direct = dir.join("direct");
    assert_ok(
        &run(&[
            "train",
            "--manifest",
            manifest.to_str().unwrap(),
            "--config",
            train_cfg.to_str().unwrap(),
            "--out",
            direct.to_str().unwrap(),
            "--val-fraction",
            "0.34",
            "--epochs",
            "3",
        ]),
        "direct train",
    );

    // 2 epochs, then resume to 3.
    let stage = dir.join("stage");
    assert_ok(
        &run(&[
            "train",
            "--manifest",
            manifest.to_str().unwrap(),
            "--config",
            train_cfg.to_str().unwrap(),
            "--out",
            stage.to_str().unwrap(),
            "--val-fraction",
            "0.34",
            "--epochs",
            "2",
        ]),
        "stage train",
    );
    let resumed = dir.join("resumed");
    assert_ok(
        &run(&[
            "train",
            "--manifest",
            manifest.to_str().unwrap(),
            "--config",
            train_cfg.to_str().unwrap(),
            "--out",
            resumed.to_str().unwrap(),
            "--val-fraction",
            "0.34",
            "--epochs",
            "3",
            "--resume",
            stage.join("last.ckpt").to_str().unwrap(),
        ]),
        "resumed train",
    );
    // The resumed final checkpoint equals the direct one bit for bit.
    assert_eq!(
        std::fs::read(direct.join("last.ckpt")).unwrap(),
        std::fs::read(resumed.join("last.ckpt")).unwrap()
    );
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn bad_inputs_exit_nonzero_with_messages() {
    let dir = temp_dir("badinput");
    // Missing manifest.
    let o = run(&[
        "eval",
        "--manifest",
        dir.join("nope.txt").to_str().unwrap(),
        "--checkpoint",
        dir.join("nope.ckpt").to_str().unwrap(),
        "--out",
        dir.join("r.txt").to_str().unwrap(),
    ]);
    assert!(!o.status.success());
    assert!(!o.stderr.is_empty());

    // Malformed manifest.
    let bad = dir.join("bad.txt");
    std::fs::write(&bad, "this is not a manifest\n").unwrap();
    let cfg = write_train_config(&dir);
    let o = run(&[
        "train",
        "--manifest",
        bad.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.join("run").to_str().unwrap(),
    ]);
    assert!(!o.status.success());
    let msg = String::from_utf8_lossy(&o.stderr);
    assert!(msg.contains("arcnet-manifest"), "unhelpful error: {msg}");

    // Unknown variant flag value.
    let o = run(&[
        "train",
        "--manifest",
        bad.to_str().unwrap(),
        "--out",
        "x",
        "--variant",
        "bogus",
    ]);
    assert!(!o.status.success());
    std::fs::remove_dir_all(&dir).ok();
}
