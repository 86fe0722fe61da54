//! Desk-scale end-to-end run: synthesize phantoms, train one or more
//! variants at reduced resolution, and print the evaluation table on
//! held-out phantom patients.
//!
//! ```text
//! cargo run --release -p arcnet --example desk_train [variants...]
//! ```

use arcnet::data::phantom::{generate_dataset, PhantomConfig};
use arcnet::data::PullbackDataset;
use arcnet::metrics::MetricsReport;
use arcnet::model::{ArcNetConfig, Variant};
use arcnet::training::{self, TrainConfig};
use arcnet::ArtifactClass;
use std::time::Instant;

fn phantom(seed: u64, pullbacks: usize, frames: usize, prefix: &str) -> Vec<PullbackDataset> {
    let cfg = PhantomConfig {
        seed,
        pullbacks,
        frames_per_pullback: frames,
        image_size: 72,
        n_alines: 24,
        patient_prefix: prefix.into(),
        vessel_radius: [0.55, 0.70],
        wall_thickness: [0.10, 0.14],
        catheter_radius: 0.10,
        mild_attenuation: [0.40, 0.70],
        anatomy_variation: 0.5,
        ..PhantomConfig::default()
    };
    generate_dataset(&cfg)
        .unwrap()
        .into_iter()
        .map(|p| p.into_dataset(72))
        .collect()
}

fn model_cfg(variant: Variant) -> ArcNetConfig {
    ArcNetConfig::reduced(variant, 72, 72, 24, 24).with_channel_scale(1, 2)
}

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let variants: Vec<Variant> = if args.is_empty() {
        vec![Variant::Full, Variant::PolarOnly]
    } else {
        args.iter().map(|a| Variant::parse(a).unwrap()).collect()
    };

    println!("generating phantoms...");
    let t0 = Instant::now();
    let all_train = phantom(1001, 10, 40, "T");
    let test = phantom(2002, 4, 25, "E");
    println!(
        "  {} train frames, {} test frames in {:.1} s",
        all_train.iter().map(|d| d.len()).sum::<usize>(),
        test.iter().map(|d| d.len()).sum::<usize>(),
        t0.elapsed().as_secs_f64()
    );

    let (ti, vi) = arcnet::data::split_by_patient(&all_train, 0.2, 5);
    let train_ds: Vec<PullbackDataset> = ti.iter().map(|&i| all_train[i].clone()).collect();
    let val_ds: Vec<PullbackDataset> = vi.iter().map(|&i| all_train[i].clone()).collect();
    println!(
        "  split: {} train / {} val pullbacks",
        train_ds.len(),
        val_ds.len()
    );

    for variant in variants {
        let cfg = TrainConfig {
            model: model_cfg(variant),
            lr0: 3e-4,
            plateau_patience: 3,
            epochs: std::env::var("EPOCHS")
                .ok()
                .and_then(|s| s.parse().ok())
                .unwrap_or(12),
            batches_per_epoch: 100,
            batch_size: 8,
            seed: 42,
            ..TrainConfig::default()
        };
        println!("== {variant} ==");
        let t0 = Instant::now();
        let out = training::train(&train_ds, &val_ds, &cfg).unwrap();
        println!(
            "  trained {} epochs x {} steps in {:.1} s ({:.2} s/step)",
            cfg.epochs,
            cfg.batches_per_epoch,
            t0.elapsed().as_secs_f64(),
            t0.elapsed().as_secs_f64() / (cfg.epochs * cfg.batches_per_epoch) as f64
        );
        for r in &out.history.epochs {
            println!(
                "  epoch {:>2}: train {:.4} val {:.4} lr {:.1e}{}",
                r.epoch,
                r.train_loss,
                r.val_loss,
                r.lr,
                if r.is_best { " *" } else { "" }
            );
        }
        let model = out.best.restore_model().unwrap();
        let preds = training::predict_dataset(&model, &test).unwrap();
        let report = MetricsReport::compute(&preds, 1).unwrap();
        if std::env::var("DEBUG_FRAMES").is_ok() {
            let (mut tp, mut fp, mut fn_) = (0, 0, 0);
            for f in preds.frames() {
                let pp = f.predicted.contains(&ArtifactClass::Mild);
                let rp = f.reference.contains(&ArtifactClass::Mild);
                match (pp, rp) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fn_ += 1,
                    _ => {}
                }
            }
            println!("  mild frames: TP {tp} FP {fp} FN {fn_}");
            for t in 0..3 {
                println!(
                    "  confusion[{t}]: {:.1} {:.1} {:.1}",
                    report.confusion.percent[t][0],
                    report.confusion.percent[t][1],
                    report.confusion.percent[t][2]
                );
            }
        }
        println!(
            "  test: bal-acc {:.3}  dice m {:.3} s {:.3}  F m {:.3} s {:.3}  frame-F m {:.3} s {:.3}",
            report.balanced_accuracy,
            report.dice[ArtifactClass::Mild.index()].mean,
            report.dice[ArtifactClass::Severe.index()].mean,
            report.aline_f[ArtifactClass::Mild.index()].value,
            report.aline_f[ArtifactClass::Severe.index()].value,
            report.framewise_f[ArtifactClass::Mild.index()].value,
            report.framewise_f[ArtifactClass::Severe.index()].value,
        );
    }
}
