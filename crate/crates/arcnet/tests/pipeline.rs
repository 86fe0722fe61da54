//! End-to-end pipeline through the library API: synthesize, persist, load,
//! train, evaluate, render.

use arcnet::data::phantom::{generate_dataset, PhantomConfig};
use arcnet::data::{self, PullbackDataset};
use arcnet::metrics::{FramePrediction, MetricsReport, PredictionSet};
use arcnet::model::{ArcNetConfig, Variant};
use arcnet::render::render_overlay;
use arcnet::training::{self, TrainConfig};

fn tiny_phantom() -> PhantomConfig {
    PhantomConfig {
        seed: 21,
        pullbacks: 3,
        frames_per_pullback: 5,
        image_size: 64,
        n_alines: 24,
        ..PhantomConfig::default()
    }
}

#[test]
fn phantom_to_disk_to_training_to_report() {
    let dir = std::env::temp_dir().join(format!("arcnet-pipeline-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();

    // Synthesize and persist.
    let generated = generate_dataset(&tiny_phantom()).unwrap();
    let manifest = data::write_dataset(&dir, &generated).unwrap();

    // Load back and train a tiny model.
    let all = data::load_dataset(&manifest, 64, 24).unwrap();
    let (ti, vi) = data::split_by_patient(&all, 0.34, 1);
    let train_ds: Vec<PullbackDataset> = ti.iter().map(|&i| all[i].clone()).collect();
    let val_ds: Vec<PullbackDataset> = vi.iter().map(|&i| all[i].clone()).collect();
    let cfg = TrainConfig {
        model: ArcNetConfig::reduced(Variant::Single, 64, 64, 24, 24).with_channel_scale(1, 4),
        lr0: 1e-3,
        epochs: 2,
        batches_per_epoch: 4,
        batch_size: 3,
        seed: 2,
        ..TrainConfig::default()
    };
    let out = training::train(&train_ds, &val_ds, &cfg).unwrap();
    assert_eq!(out.history.epochs.len(), 2);

    // Checkpoint round trip through disk, then evaluate.
    let ck_path = dir.join("best.ckpt");
    out.best.save(&ck_path).unwrap();
    let model = arcnet::checkpoint::Checkpoint::load(&ck_path)
        .unwrap()
        .restore_model()
        .unwrap();
    let preds = training::predict_dataset(&model, &val_ds).unwrap();
    let report = MetricsReport::compute(&preds, 1).unwrap();
    let text = report.to_text();
    for key in [
        "balanced_accuracy:",
        "dice_mild_mean:",
        "fscore_severe:",
        "framewise_fscore_mild:",
        "confusion_severe:",
    ] {
        assert!(text.contains(key), "missing {key}");
    }
    // Confusion rows sum to 100 (within rounding) unless flagged empty.
    for (t, row) in report.confusion.percent.iter().enumerate() {
        if !report.confusion.empty_rows[t] {
            assert!((row.iter().sum::<f64>() - 100.0).abs() < 0.01);
        }
    }

    // Overlay rendering on a loaded frame with model predictions.
    let ds = &val_ds[0];
    let pair = data::make_input_stack(ds, 0, 24, 24).unwrap();
    let logits = model.forward_infer(&[pair]).unwrap();
    let predicted: Vec<arcnet::ArtifactClass> = logits[0]
        .argmax()
        .into_iter()
        .map(|c| arcnet::ArtifactClass::from_u8(c as u8).unwrap())
        .collect();
    let img = render_overlay(&ds.frames[0], &ds.labels[0], &predicted).unwrap();
    assert_eq!((img.width, img.height), (64, 64));

    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn perfect_predictor_scores_ones() {
    // Feeding the references back as predictions must give perfect scores
    // across the whole suite.
    let generated = generate_dataset(&tiny_phantom()).unwrap();
    let mut set = PredictionSet::new();
    let mut any_mild = false;
    let mut any_severe = false;
    for pb in &generated {
        for (t, y) in pb.labels.iter().enumerate() {
            any_mild |= y.contains(&arcnet::ArtifactClass::Mild);
            any_severe |= y.contains(&arcnet::ArtifactClass::Severe);
            set.push(FramePrediction {
                pullback: pb.pullback_id.clone(),
                frame: t,
                predicted: y.clone(),
                reference: y.clone(),
            })
            .unwrap();
        }
    }
    assert!(
        any_mild && any_severe,
        "phantom should contain both classes"
    );
    let report = MetricsReport::compute(&set, 1).unwrap();
    assert_eq!(report.balanced_accuracy, 1.0);
    for c in 0..3 {
        assert_eq!(report.aline_f[c].value, 1.0);
        assert_eq!(report.framewise_f[c].value, 1.0);
        if report.dice[c].included_frames > 0 {
            assert!((report.dice[c].mean - 1.0).abs() < 1e-12);
            assert_eq!(report.dice[c].sd, 0.0);
        }
        assert!((report.confusion.percent[c][c] - 100.0).abs() < 1e-9);
    }
}

/// The parallel build must produce bitwise identical results regardless of
/// the worker count (disjoint writes, ordered reductions).
#[cfg(feature = "parallel")]
#[test]
fn results_identical_across_thread_counts() {
    let run = |threads: usize| -> Vec<f64> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap();
        pool.install(|| {
            let generated = generate_dataset(&tiny_phantom()).unwrap();
            let all: Vec<PullbackDataset> =
                generated.into_iter().map(|p| p.into_dataset(64)).collect();
            let cfg = TrainConfig {
                model: ArcNetConfig::reduced(Variant::Full, 64, 64, 24, 24)
                    .with_channel_scale(1, 4),
                lr0: 1e-3,
                epochs: 1,
                batches_per_epoch: 3,
                batch_size: 2,
                seed: 13,
                ..TrainConfig::default()
            };
            let out = training::train(&all[..2], &all[2..], &cfg).unwrap();
            out.last
                .params
                .iter()
                .flat_map(|t| t.values.iter().copied())
                .collect()
        })
    };
    let single = run(1);
    let multi = run(4);
    assert_eq!(single, multi);
}
