//! Acceptance suite: one test per release criterion, each printing a
//! PASS/FAIL line (run with `--nocapture` to see them). Tolerances are
//! pinned in the assertions.

use arcnet::data::phantom::{generate_dataset, PhantomConfig};
use arcnet::data::PullbackDataset;
use arcnet::geometry::{self, CartesianGrid};
use arcnet::loss::{self, Logits};
use arcnet::metrics::{self, FramePrediction, MetricsReport, PredictionSet};
use arcnet::model::{ArcNet, ArcNetConfig, InputPair, Variant};
use arcnet::sampler;
use arcnet::training::{self, TrainConfig};
use arcnet::{AnnotationVector, ArtifactClass};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::PI;
use std::time::Instant;

fn report(criterion: &str, pass: bool, detail: &str) {
    println!(
        "ACCEPTANCE {criterion}: {} ({detail})",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "criterion {criterion} failed: {detail}");
}

/// Smooth band-limited test image: a sum of broad Gaussian bumps evaluated
/// analytically, so rotated copies carry no resampling error.
struct BumpField {
    bumps: Vec<(f64, f64, f64, f64)>,
}

impl BumpField {
    fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        BumpField {
            bumps: (0..6)
                .map(|_| {
                    (
                        rng.random_range(-120.0..120.0),
                        rng.random_range(-120.0..120.0),
                        rng.random_range(12.0..40.0),
                        rng.random_range(0.2..1.0),
                    )
                })
                .collect(),
        }
    }

    fn render(&self, size: usize, angle: f64) -> CartesianGrid {
        let c = (size as f64 - 1.0) / 2.0;
        let (sin_a, cos_a) = angle.sin_cos();
        let mut data = Vec::with_capacity(size * size);
        for y in 0..size {
            for x in 0..size {
                let dy = y as f64 - c;
                let dx = x as f64 - c;
                let sy = dy * cos_a - dx * sin_a;
                let sx = dx * cos_a + dy * sin_a;
                let v: f64 = self
                    .bumps
                    .iter()
                    .map(|&(by, bx, s, a)| {
                        let d2 = (sy - by) * (sy - by) + (sx - bx) * (sx - bx);
                        a * (-d2 / (2.0 * s * s)).exp()
                    })
                    .sum();
                data.push(v);
            }
        }
        CartesianGrid::new(1, size, size, data).unwrap()
    }
}

fn dynamic_range(g: &CartesianGrid) -> f64 {
    let max = g.data().iter().cloned().fold(f64::MIN, f64::max);
    let min = g.data().iter().cloned().fold(f64::MAX, f64::min);
    max - min
}

#[test]
fn criterion_1_geometry_round_trip() {
    let size = 352;
    let rmax = geometry::r_max(size, size);
    let c = (size as f64 - 1.0) / 2.0;
    let mut worst = 0.0f64;
    let start = Instant::now();
    for seed in 0..20 {
        let img = BumpField::random(100 + seed).render(size, 0.0);
        let range = dynamic_range(&img);
        let polar = geometry::to_polar(&img, 176, 224).unwrap();
        let back = geometry::to_cartesian(&polar, size, size).unwrap();
        let mut err = 0.0;
        let mut count = 0usize;
        for y in 0..size {
            for x in 0..size {
                let dy = y as f64 - c;
                let dx = x as f64 - c;
                if dy.hypot(dx) > rmax - 1.0 {
                    continue;
                }
                err += (back.at(0, y, x) - img.at(0, y, x)).abs();
                count += 1;
            }
        }
        worst = worst.max(err / count as f64 / range);
    }
    let ms_per_frame = start.elapsed().as_secs_f64() * 1000.0 / 20.0;
    report(
        "1 geometry round-trip",
        worst <= 0.02 && ms_per_frame < 50.0,
        &format!(
            "worst MAE {:.4}% of range (<= 2%), {ms_per_frame:.1} ms/frame (< 50)",
            worst * 100.0
        ),
    );
}

#[test]
fn criterion_2_rotation_shift_equivariance() {
    let theta = 224usize;
    let field = BumpField::random(7);
    let img = field.render(352, 0.0);
    let range = dynamic_range(&img);
    let polar = geometry::to_polar(&img, 176, theta).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let k = rng.random_range(1..theta);
        let rotated = field.render(352, 2.0 * PI * k as f64 / theta as f64);
        let polar_rot = geometry::to_polar(&rotated, 176, theta).unwrap();
        let mut err = 0.0;
        for r in 0..176 {
            for j in 0..theta {
                let want = polar.data()[r * theta + (j + theta - k) % theta];
                err += (polar_rot.data()[r * theta + j] - want).abs();
            }
        }
        worst = worst.max(err / (176.0 * theta as f64) / range);
    }
    report(
        "2 rotation-shift equivariance",
        worst <= 1e-3,
        &format!("worst MAE {:.2e} of range (<= 1e-3)", worst),
    );
}

#[test]
fn criterion_3_loss_gradient_check() {
    let theta = 16;
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    // Resample until every circular neighbor difference clears the |.| kink
    // of the TV term by a wide margin, so central differences stay on one
    // side of the subgradient.
    let x = loop {
        let cand = Logits::new(
            theta,
            3,
            (0..theta * 3)
                .map(|_| rng.random_range(-2.0..2.0))
                .collect(),
        );
        let kink_free = (0..theta)
            .all(|i| (0..3).all(|c| (cand.at((i + 1) % theta, c) - cand.at(i, c)).abs() > 1e-3));
        if kink_free {
            break cand;
        }
    };
    let y: AnnotationVector = (0..theta)
        .map(|_| ArtifactClass::from_u8(rng.random_range(0..3u8)).unwrap())
        .collect();

    // Analytic gradient of the combined loss, plus each term in isolation
    // through the combined weighting (lambda toggles and term doubling).
    let h = 1e-6;
    let mut max_rel = 0.0f64;
    type TermEval = Box<dyn Fn(&Logits) -> f64>;
    let evals: Vec<(&str, TermEval)> = vec![
        (
            "ce",
            Box::new({
                let y = y.clone();
                move |l: &Logits| loss::cross_entropy(l, &y).unwrap()
            }),
        ),
        (
            "dice",
            Box::new({
                let y = y.clone();
                move |l: &Logits| loss::soft_dice_1d(l, &y).unwrap()
            }),
        ),
        ("tv", Box::new(|l: &Logits| loss::total_variation(l))),
        (
            "combined",
            Box::new({
                let y = y.clone();
                move |l: &Logits| {
                    loss::combined(l, &y, loss::DEFAULT_LAMBDA_TV)
                        .unwrap()
                        .total
                }
            }),
        ),
    ];
    // Analytic gradients: combined carries all three; isolate the terms by
    // linear combinations of combined gradients at lambda in {0, 1} plus the
    // CE gradient recovered via the (0.5 CE + 0.5 Dice) split.
    let (_, g_comb) = loss::combined_with_grad(&x, &y, loss::DEFAULT_LAMBDA_TV).unwrap();
    let (_, g_l0) = loss::combined_with_grad(&x, &y, 0.0).unwrap();
    let (_, g_l1) = loss::combined_with_grad(&x, &y, 1.0).unwrap();
    // tv gradient = g(lambda=1) - g(lambda=0)
    let g_tv: Vec<f64> = g_l1
        .data()
        .iter()
        .zip(g_l0.data())
        .map(|(a, b)| a - b)
        .collect();
    // For CE alone: finite differences are checked against d(2*(combined
    // lambda=0)) restricted... instead check CE and Dice analytically via
    // their own FD below using the term evaluators and the identity
    // g_l0 = 0.5 g_ce + 0.5 g_dice; a second equation comes from FD of CE.
    for (name, f) in &evals {
        for i in 0..theta {
            for c in 0..3 {
                let mut xp = x.clone();
                xp.set(i, c, x.at(i, c) + h);
                let mut xm = x.clone();
                xm.set(i, c, x.at(i, c) - h);
                let fd = (f(&xp) - f(&xm)) / (2.0 * h);
                let analytic = match *name {
                    "combined" => g_comb.at(i, c),
                    "tv" => g_tv[i * 3 + c],
                    // CE and Dice against the half-weighted combined parts:
                    // check 0.5*ce_fd + 0.5*dice_fd == g_l0 handled under
                    // "combined"; here compare each term's FD to the value
                    // reconstructed from the analytic system.
                    "ce" => {
                        // g_ce = (p - onehot)/theta; recompute directly.
                        let p = x.softmax();
                        let onehot = if y[i].index() == c { 1.0 } else { 0.0 };
                        (p[i * 3 + c] - onehot) / theta as f64
                    }
                    "dice" => {
                        // g_dice = 2*g_l0 - g_ce.
                        let p = x.softmax();
                        let onehot = if y[i].index() == c { 1.0 } else { 0.0 };
                        let g_ce = (p[i * 3 + c] - onehot) / theta as f64;
                        2.0 * g_l0.at(i, c) - g_ce
                    }
                    _ => unreachable!(),
                };
                // The floor absorbs the O(f * eps / h) cancellation noise
                // of central differences at zero-gradient entries.
                let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-4);
                max_rel = max_rel.max(rel);
            }
        }
    }
    report(
        "3 loss gradient check",
        max_rel <= 1e-4,
        &format!("max relative error {max_rel:.2e} (<= 1e-4)"),
    );
}

fn random_pair(cfg: &ArcNetConfig, seed: u64) -> InputPair {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..cfg.stack_depth * cfg.height * cfg.width)
        .map(|_| rng.random_range(0.0..1.0))
        .collect();
    let cart = CartesianGrid::new(cfg.stack_depth, cfg.height, cfg.width, data).unwrap();
    let polar = geometry::to_polar(&cart, cfg.rho, cfg.theta).unwrap();
    InputPair { cart, polar }
}

#[test]
fn criterion_4_end_to_end_gradient_check() {
    // Reduced configuration: 64x64 Cartesian, 32x40 polar, production
    // feature sizes.
    let cfg = ArcNetConfig::reduced(Variant::Full, 64, 64, 32, 40);
    let mut net = ArcNet::build(cfg.clone(), 17).unwrap();
    let pairs = vec![random_pair(&cfg, 23)];
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    let y: Vec<AnnotationVector> = vec![(0..cfg.theta)
        .map(|_| ArtifactClass::from_u8(rng.random_range(0..3u8)).unwrap())
        .collect()];

    let eval_loss = |net: &mut ArcNet| -> f64 {
        let (logits, _) = net.forward_train(&pairs, false).unwrap();
        loss::combined(&logits[0], &y[0], loss::DEFAULT_LAMBDA_TV)
            .unwrap()
            .total
    };
    let analytic = {
        let (logits, trace) = net.forward_train(&pairs, false).unwrap();
        let (_, g) = loss::combined_with_grad(&logits[0], &y[0], loss::DEFAULT_LAMBDA_TV).unwrap();
        let mut grads = vec![0.0; net.params().len()];
        net.backward(&trace, &[g], &mut grads);
        grads
    };

    let h = 1e-5;
    let mut max_rel = 0.0f64;
    for _ in 0..12 {
        let i = rng.random_range(0..net.params().len());
        let orig = net.params().values()[i];
        net.params_mut().values_mut()[i] = orig + h;
        let fp = eval_loss(&mut net);
        net.params_mut().values_mut()[i] = orig - h;
        let fm = eval_loss(&mut net);
        net.params_mut().values_mut()[i] = orig;
        let fd = (fp - fm) / (2.0 * h);
        let a = analytic[i];
        let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
        max_rel = max_rel.max(rel);
    }
    report(
        "4 end-to-end gradient check",
        max_rel <= 1e-3,
        &format!("max relative error {max_rel:.2e} (<= 1e-3) over 12 sampled parameters"),
    );
}

#[test]
fn criterion_5_output_contract_full_size() {
    let mut ok = true;
    let mut detail = String::new();
    for variant in Variant::ALL {
        let cfg = ArcNetConfig::full_size(variant);
        let net = ArcNet::build(cfg.clone(), 3).unwrap();
        let logits = net.forward_infer(&[random_pair(&cfg, 5)]).unwrap();
        let shape_ok = logits.len() == 1 && logits[0].theta() == 224 && logits[0].classes() == 3;
        ok &= shape_ok;
        detail.push_str(&format!(
            "{variant}: ({}, {}) ",
            logits[0].theta(),
            logits[0].classes()
        ));
    }
    report(
        "5 output contract",
        ok,
        &format!("{detail}— expected (224, 3) each"),
    );
}

#[test]
fn criterion_6_sampler_weights_and_frequencies() {
    let w = sampler::compute_weights(&[0, 0, 0, 5, 5, 7]).unwrap();
    let exact = w.weights() == [1.0, 1.0, 1.0, 1.5, 1.5, 3.0];

    let n = 1_000_000usize;
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    let draws = w.draw(&mut rng, n);
    let mut counts = [0usize; 6];
    for d in draws {
        counts[d] += 1;
    }
    let total: f64 = w.weights().iter().sum();
    let mut worst = 0.0f64;
    for (i, &c) in counts.iter().enumerate() {
        let want = w.weights()[i] / total;
        let got = c as f64 / n as f64;
        worst = worst.max((got - want).abs());
    }
    report(
        "6 sampler",
        exact && worst < 0.01,
        &format!("weights exact: {exact}; worst frequency deviation {worst:.4} (< 0.01)"),
    );
}

mod counting_oracle {
    use super::*;

    pub fn balanced(set: &PredictionSet) -> f64 {
        let mut recalls = Vec::new();
        for c in ArtifactClass::ALL {
            let mut tp = 0usize;
            let mut total = 0usize;
            for f in set.frames() {
                for i in 0..f.reference.len() {
                    if f.reference[i] == c {
                        total += 1;
                        if f.predicted[i] == c {
                            tp += 1;
                        }
                    }
                }
            }
            if total > 0 {
                recalls.push(tp as f64 / total as f64);
            }
        }
        recalls.iter().sum::<f64>() / recalls.len() as f64
    }

    pub fn fscore(tp: usize, fp: usize, fn_: usize) -> f64 {
        if tp + fp + fn_ == 0 {
            1.0
        } else {
            2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
        }
    }

    pub fn aline_f(set: &PredictionSet, c: ArtifactClass) -> f64 {
        let (mut tp, mut fp, mut fn_) = (0, 0, 0);
        for f in set.frames() {
            for i in 0..f.reference.len() {
                match (f.predicted[i] == c, f.reference[i] == c) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fn_ += 1,
                    _ => {}
                }
            }
        }
        fscore(tp, fp, fn_)
    }

    pub fn framewise(set: &PredictionSet, c: ArtifactClass) -> f64 {
        let (mut tp, mut fp, mut fn_) = (0, 0, 0);
        for f in set.frames() {
            let pp = f.predicted.contains(&c);
            let rp = f.reference.contains(&c);
            match (pp, rp) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                _ => {}
            }
        }
        fscore(tp, fp, fn_)
    }

    pub fn dice(set: &PredictionSet, c: ArtifactClass) -> (usize, f64) {
        let mut vals = Vec::new();
        for f in set.frames() {
            let np = f.predicted.iter().filter(|&&x| x == c).count();
            let nr = f.reference.iter().filter(|&&x| x == c).count();
            let nb = (0..f.reference.len())
                .filter(|&i| f.predicted[i] == c && f.reference[i] == c)
                .count();
            if np > 0 && nr > 0 {
                vals.push(2.0 * nb as f64 / (np + nr) as f64);
            }
        }
        let n = vals.len();
        let mean = if n == 0 {
            0.0
        } else {
            vals.iter().sum::<f64>() / n as f64
        };
        (n, mean)
    }

    pub fn confusion(set: &PredictionSet) -> [[usize; 3]; 3] {
        let mut m = [[0usize; 3]; 3];
        for f in set.frames() {
            for i in 0..f.reference.len() {
                m[f.reference[i].index()][f.predicted[i].index()] += 1;
            }
        }
        m
    }
}

#[test]
fn criterion_7_metrics_oracle_equivalence() {
    let mut rng = ChaCha8Rng::seed_from_u64(71);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let mut set = PredictionSet::new();
        let frames = rng.random_range(1..=20);
        for f in 0..frames {
            let theta = 16;
            let reference: AnnotationVector = (0..theta)
                .map(|_| {
                    ArtifactClass::from_u8([0, 0, 0, 1, 1, 2][rng.random_range(0..6)]).unwrap()
                })
                .collect();
            let predicted: AnnotationVector = (0..theta)
                .map(|_| ArtifactClass::from_u8([0, 0, 1, 2][rng.random_range(0..4)]).unwrap())
                .collect();
            set.push(FramePrediction {
                pullback: format!("PB{}", f % 2),
                frame: f,
                predicted,
                reference,
            })
            .unwrap();
        }
        let (ba, _) = metrics::balanced_accuracy(&set);
        worst = worst.max((ba - counting_oracle::balanced(&set)).abs());
        let cm = metrics::confusion_matrix(&set);
        let want_cm = counting_oracle::confusion(&set);
        assert_eq!(cm.counts, want_cm, "confusion counts must match exactly");
        for c in ArtifactClass::ALL {
            worst = worst.max(
                (metrics::aline_fscore(&set, c).value - counting_oracle::aline_f(&set, c)).abs(),
            );
            worst = worst.max(
                (metrics::framewise_fscore(&set, c, 1).value - counting_oracle::framewise(&set, c))
                    .abs(),
            );
            let got = metrics::dice_summary(&set, c).unwrap();
            let (n, mean) = counting_oracle::dice(&set, c);
            assert_eq!(got.included_frames, n);
            if n > 0 {
                worst = worst.max((got.mean - mean).abs());
            }
        }
    }
    report(
        "7 metrics oracle equivalence",
        worst <= 1e-12,
        &format!("100 randomized sets; worst ratio deviation {worst:.2e} (<= 1e-12), counts exact"),
    );
}

fn desk_phantom(seed: u64, pullbacks: usize, frames: usize, prefix: &str) -> Vec<PullbackDataset> {
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

fn desk_train_config(variant: Variant) -> TrainConfig {
    TrainConfig {
        model: ArcNetConfig::reduced(variant, 72, 72, 24, 24).with_channel_scale(1, 2),
        lr0: 3e-4,
        plateau_patience: 3,
        epochs: 24,
        batches_per_epoch: 100,
        batch_size: 8,
        seed: 42,
        ..TrainConfig::default()
    }
}

#[test]
fn criterion_8_desk_scale_learning() {
    let start = Instant::now();
    // 400 training frames from 10 phantom patients; 100 held-out frames from
    // 4 unseen patients.
    let all_train = desk_phantom(1001, 10, 40, "T");
    let test = desk_phantom(2002, 4, 25, "E");
    assert_eq!(all_train.iter().map(|d| d.len()).sum::<usize>(), 400);
    assert_eq!(test.iter().map(|d| d.len()).sum::<usize>(), 100);
    let (ti, vi) = arcnet::data::split_by_patient(&all_train, 0.2, 5);
    let train_ds: Vec<PullbackDataset> = ti.iter().map(|&i| all_train[i].clone()).collect();
    let val_ds: Vec<PullbackDataset> = vi.iter().map(|&i| all_train[i].clone()).collect();

    let mut framewise = Vec::new();
    for variant in [Variant::Full, Variant::PolarOnly] {
        let cfg = desk_train_config(variant);
        let out = training::train(&train_ds, &val_ds, &cfg).unwrap();
        let model = out.best.restore_model().unwrap();
        let preds = training::predict_dataset(&model, &test).unwrap();
        let rep = MetricsReport::compute(&preds, 1).unwrap();
        framewise.push((
            rep.framewise_f[ArtifactClass::Mild.index()].value,
            rep.framewise_f[ArtifactClass::Severe.index()].value,
        ));
    }
    let (full_mild, full_severe) = framewise[0];
    let (polar_mild, _) = framewise[1];
    let minutes = start.elapsed().as_secs_f64() / 60.0;
    let pass = full_severe >= 0.90 && full_mild >= 0.70 && full_mild - polar_mild >= 0.03;
    report(
        "8 desk-scale learning",
        pass && minutes < 120.0,
        &format!(
            "full frame-F severe {full_severe:.3} (>= 0.90), mild {full_mild:.3} (>= 0.70), \
             full - polar mild gap {:.3} (>= 0.03); {minutes:.1} min (< 120)",
            full_mild - polar_mild
        ),
    );
}

#[test]
fn criterion_9_absolute_scores_not_asserted() {
    // The clinical dataset is unavailable, so the published absolute scores
    // (e.g. frame-wise F 0.77 mild / 0.94 severe) are out of reach by
    // construction. The substitute evidence is criteria 1-8 plus the
    // per-module invariant suites in the library tests; nothing here may
    // assert those absolute numbers against synthetic data.
    report(
        "9 absolute clinical scores",
        true,
        "not reproducible by design; substituted by criteria 1-8 and module invariant suites",
    );
}

#[test]
fn criterion_10_throughput_report() {
    // A 500-frame phantom pullback at desk scale; the report must state the
    // wall time and per-frame rate. No fixed bound is asserted on CPU.
    let cfg = PhantomConfig {
        seed: 77,
        pullbacks: 1,
        frames_per_pullback: 500,
        image_size: 72,
        n_alines: 24,
        ..PhantomConfig::default()
    };
    let ds = generate_dataset(&cfg)
        .unwrap()
        .into_iter()
        .next()
        .unwrap()
        .into_dataset(72);
    let model_cfg = ArcNetConfig::reduced(Variant::Full, 72, 72, 24, 24).with_channel_scale(1, 2);
    let model = ArcNet::build(model_cfg, 9).unwrap();
    let (logits, timing) = training::infer(&ds, &model).unwrap();
    println!("throughput: {timing}");
    let ok = logits.len() == 500
        && logits.iter().all(|l| l.theta() == 24 && l.classes() == 3)
        && timing.frames == 500
        && timing.ms_per_frame > 0.0
        && timing.total.as_secs_f64() > 0.0;
    report(
        "10 throughput report",
        ok,
        &format!(
            "500-frame pullback: {:.3} s total, {:.2} ms/frame (reference GPU timing documented in README)",
            timing.total.as_secs_f64(),
            timing.ms_per_frame
        ),
    );
}
