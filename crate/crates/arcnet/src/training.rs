//! Optimization loop: Adam with plateau-based learning-rate decay, a fixed
//! epoch/batch budget, stratified sampling, augmentation, and
//! best-on-validation model selection.
//!
//! Training is bitwise reproducible for a fixed seed: every rng stream is
//! keyed by role and position (epoch, step, slot), batch assembly is
//! order-preserving, and gradients reduce in a fixed order. Resuming from
//! the `last` checkpoint replays the remaining epochs exactly.

use crate::checkpoint::{Checkpoint, CheckpointMeta};
use crate::data::{self, PullbackDataset};
use crate::error::{Error, Result};
use crate::loss::{self, Logits};
use crate::metrics::{FramePrediction, PredictionSet};
use crate::model::{ArcNet, ArcNetConfig, Variant};
use crate::par;
use crate::sampler;
use crate::seed_mix;
use crate::ArtifactClass;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::time::{Duration, Instant};

/// Training protocol parameters. Defaults follow the production recipe
/// (lr 1e-5 halved after 5 stale epochs, 100 epochs x 250 batches of 12);
/// every field scales down for desk-size runs.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ArcNetConfig,
    pub lr0: f64,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub epochs: usize,
    pub batches_per_epoch: usize,
    pub batch_size: usize,
    pub lambda_tv: f64,
    pub seed: u64,
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ArcNetConfig::full_size(Variant::Full),
            lr0: 1e-5,
            plateau_factor: 0.5,
            plateau_patience: 5,
            epochs: 100,
            batches_per_epoch: 250,
            batch_size: 12,
            lambda_tv: loss::DEFAULT_LAMBDA_TV,
            seed: 0,
            augment: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.plateau_patience < 1 {
            return Err(Error::Invalid("plateau patience must be >= 1".into()));
        }
        if self.lr0 <= 0.0 || self.plateau_factor <= 0.0 || self.plateau_factor >= 1.0 {
            return Err(Error::Invalid(
                "learning rates must be positive, factor in (0, 1)".into(),
            ));
        }
        if self.batch_size < 1 || self.batches_per_epoch < 1 || self.epochs < 1 {
            return Err(Error::Invalid(
                "epochs, batches and batch size must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Adam with standard moment defaults.
#[derive(Clone, Debug)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(params.len(), grads.len());
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = self.m[i] / b1t;
            let vhat = self.v[i] / b2t;
            params[i] -= lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

/// Plateau rule: halve after `patience` consecutive epochs without a strict
/// improvement of the best validation loss; the stale counter resets after
/// each reduction.
#[derive(Clone, Debug)]
pub struct PlateauSchedule {
    pub lr: f64,
    factor: f64,
    patience: usize,
    best: f64,
    since_best: usize,
    pub reductions: usize,
}

impl PlateauSchedule {
    pub fn new(lr0: f64, factor: f64, patience: usize) -> Self {
        PlateauSchedule {
            lr: lr0,
            factor,
            patience,
            best: f64::INFINITY,
            since_best: 0,
            reductions: 0,
        }
    }

    /// Feed one epoch's validation loss; returns true when the rate dropped.
    pub fn observe(&mut self, val_loss: f64) -> bool {
        if val_loss < self.best {
            self.best = val_loss;
            self.since_best = 0;
            return false;
        }
        self.since_best += 1;
        if self.since_best >= self.patience {
            self.lr *= self.factor;
            self.reductions += 1;
            self.since_best = 0;
            return true;
        }
        false
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
    pub is_best: bool,
}

#[derive(Clone, Debug, Default)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub step_losses: Vec<f64>,
}

impl TrainHistory {
    /// Structured text rendering (one row per epoch).
    pub fn to_text(&self) -> String {
        let mut out = String::from("arcnet-history v1\nepoch\ttrain_loss\tval_loss\tlr\tbest\n");
        for r in &self.epochs {
            let _ = writeln!(
                out,
                "{}\t{:.8}\t{:.8}\t{:.3e}\t{}",
                r.epoch,
                r.train_loss,
                r.val_loss,
                r.lr,
                if r.is_best { "*" } else { "-" }
            );
        }
        out
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    /// Model with the lowest validation loss (deployment checkpoint).
    pub best: Checkpoint,
    /// Final state including optimizer extras; feed back in to resume.
    pub last: Checkpoint,
    pub history: TrainHistory,
}

fn frame_index(datasets: &[PullbackDataset]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (pi, ds) in datasets.iter().enumerate() {
        for t in 0..ds.len() {
            out.push((pi, t));
        }
    }
    out
}

fn check_dataset_against_model(datasets: &[PullbackDataset], cfg: &ArcNetConfig) -> Result<()> {
    for ds in datasets {
        if ds.is_empty() {
            continue;
        }
        if ds.n_alines() != cfg.theta {
            return Err(Error::ConfigMismatch(format!(
                "pullback {} has {} A-lines per frame, model expects {}",
                ds.pullback_id,
                ds.n_alines(),
                cfg.theta
            )));
        }
        if ds.frames[0].size != cfg.height {
            return Err(Error::ConfigMismatch(format!(
                "pullback {} frames are {}px, model expects {}px",
                ds.pullback_id, ds.frames[0].size, cfg.height
            )));
        }
    }
    Ok(())
}

/// Mean composite loss over every frame of `datasets`, inference mode.
pub fn dataset_loss(model: &ArcNet, datasets: &[PullbackDataset], lambda: f64) -> Result<f64> {
    let frames = frame_index(datasets);
    if frames.is_empty() {
        return Err(Error::Invalid("validation set has no frames".into()));
    }
    let cfg = model.config();
    let losses = par::map_indexed(frames.len(), |i| -> Result<f64> {
        let (pi, t) = frames[i];
        let pair = data::make_input_stack(&datasets[pi], t, cfg.rho, cfg.theta)?;
        let logits = model.forward_infer(&[pair])?;
        Ok(loss::combined(&logits[0], &datasets[pi].labels[t], lambda)?.total)
    });
    let mut acc = 0.0;
    for l in losses {
        acc += l?;
    }
    Ok(acc / frames.len() as f64)
}

/// Argmax predictions for whole datasets, paired with the references.
pub fn predict_dataset(model: &ArcNet, datasets: &[PullbackDataset]) -> Result<PredictionSet> {
    let cfg = model.config();
    check_dataset_against_model(datasets, cfg)?;
    let frames = frame_index(datasets);
    let rows = par::map_indexed(frames.len(), |i| -> Result<FramePrediction> {
        let (pi, t) = frames[i];
        let ds = &datasets[pi];
        let pair = data::make_input_stack(ds, t, cfg.rho, cfg.theta)?;
        let logits = model.forward_infer(&[pair])?;
        let predicted: Vec<ArtifactClass> = logits[0]
            .argmax()
            .into_iter()
            .map(|c| ArtifactClass::from_u8(c as u8).unwrap())
            .collect();
        Ok(FramePrediction {
            pullback: ds.pullback_id.clone(),
            frame: t,
            predicted,
            reference: ds.labels[t].clone(),
        })
    });
    let mut set = PredictionSet::new();
    for r in rows {
        set.push(r?)?;
    }
    Ok(set)
}

/// Run the optimization loop from scratch.
pub fn train(
    train_ds: &[PullbackDataset],
    val_ds: &[PullbackDataset],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    train_from(train_ds, val_ds, cfg, None)
}

/// Run the optimization loop, optionally resuming from a `last` checkpoint.
pub fn train_from(
    train_ds: &[PullbackDataset],
    val_ds: &[PullbackDataset],
    cfg: &TrainConfig,
    resume: Option<&Checkpoint>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if !data::patients_disjoint(&[train_ds, val_ds]) {
        return Err(Error::Invalid(
            "training and validation sets share a patient id".into(),
        ));
    }
    check_dataset_against_model(train_ds, &cfg.model)?;
    check_dataset_against_model(val_ds, &cfg.model)?;
    let frames = frame_index(train_ds);
    if frames.is_empty() {
        return Err(Error::Invalid("training set has no frames".into()));
    }

    // Stratified sampling weights from the proxy metric.
    let proxy: Vec<u32> = frames
        .iter()
        .map(|&(pi, t)| sampler::proxy_metric(&train_ds[pi].labels[t]))
        .collect();
    let weighting = sampler::compute_weights(&proxy)?;

    let mut model = ArcNet::build(cfg.model.clone(), cfg.seed)?;
    let mut adam = Adam::new(model.params().len());
    let mut schedule = PlateauSchedule::new(cfg.lr0, cfg.plateau_factor, cfg.plateau_patience);
    let mut history = TrainHistory::default();
    let mut best_params: Vec<f64> = model.params().values().to_vec();
    let mut best_buffers: Vec<f64> = model.buffers().values().to_vec();
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0usize;
    let mut start_epoch = 0usize;

    if let Some(ck) = resume {
        if ck.config != cfg.model {
            return Err(Error::ConfigMismatch(
                "resume checkpoint was trained under a different model configuration".into(),
            ));
        }
        let restored = ck.restore_model()?;
        model
            .params_mut()
            .values_mut()
            .copy_from_slice(restored.params().values());
        model
            .buffers_mut()
            .values_mut()
            .copy_from_slice(restored.buffers().values());
        let need = |name: &str| -> Result<&crate::checkpoint::NamedTensor> {
            ck.extra(name).ok_or_else(|| {
                Error::Checkpoint(format!("resume checkpoint is missing extra '{name}'"))
            })
        };
        adam.m.copy_from_slice(&need("adam.m")?.values);
        adam.v.copy_from_slice(&need("adam.v")?.values);
        adam.t = need("adam.t")?.values[0] as u64;
        let s = need("schedule")?;
        schedule.lr = s.values[0];
        schedule.best = s.values[1];
        schedule.since_best = s.values[2] as usize;
        schedule.reductions = s.values[3] as usize;
        best_params.copy_from_slice(&need("best.params")?.values);
        best_buffers.copy_from_slice(&need("best.buffers")?.values);
        best_val = need("best.val")?.values[0];
        best_epoch = need("best.epoch")?.values[0] as usize;
        start_epoch = ck.meta.epoch;
    }

    let theta = cfg.model.theta;
    for epoch in start_epoch..cfg.epochs {
        let mut sampler_rng =
            ChaCha8Rng::seed_from_u64(seed_mix(&[cfg.seed, 0xBA7C, epoch as u64]));
        let mut epoch_loss = 0.0;
        for step in 0..cfg.batches_per_epoch {
            let picks = weighting.draw(&mut sampler_rng, cfg.batch_size);
            // Assemble (and optionally augment) the batch; each slot owns an
            // rng keyed by (seed, epoch, step, slot) so scheduling cannot
            // change the stream.
            let batch = par::map_indexed(cfg.batch_size, |slot| {
                let (pi, t) = frames[picks[slot]];
                let ds = &train_ds[pi];
                let pair = data::make_input_stack(ds, t, cfg.model.rho, theta)?;
                if cfg.augment {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed_mix(&[
                        cfg.seed,
                        0xA069,
                        epoch as u64,
                        step as u64,
                        slot as u64,
                    ]));
                    Ok(data::augment(&pair, &ds.labels[t], &mut rng))
                } else {
                    Ok((pair, ds.labels[t].clone()))
                }
            });
            let mut pairs = Vec::with_capacity(cfg.batch_size);
            let mut labels = Vec::with_capacity(cfg.batch_size);
            for b in batch {
                let (p, y) = b?;
                pairs.push(p);
                labels.push(y);
            }

            let (logits, trace) = model.forward_train(&pairs, true)?;
            let mut dlogits: Vec<Logits> = Vec::with_capacity(cfg.batch_size);
            let mut batch_loss = 0.0;
            for (l, y) in logits.iter().zip(&labels) {
                let (breakdown, mut grad) = loss::combined_with_grad(l, y, cfg.lambda_tv)?;
                batch_loss += breakdown.total / cfg.batch_size as f64;
                for v in grad.data_mut() {
                    *v /= cfg.batch_size as f64;
                }
                dlogits.push(grad);
            }
            if !batch_loss.is_finite() {
                let dump: Vec<String> = picks
                    .iter()
                    .map(|&i| {
                        let (pi, t) = frames[i];
                        format!("{}#{}", train_ds[pi].pullback_id, t)
                    })
                    .collect();
                return Err(Error::NonFiniteLoss {
                    epoch,
                    step,
                    detail: format!("batch [{}]", dump.join(", ")),
                });
            }
            let mut grads = vec![0.0; model.params().len()];
            model.backward(&trace, &dlogits, &mut grads);
            adam.step(model.params_mut().values_mut(), &grads, schedule.lr);
            history.step_losses.push(batch_loss);
            epoch_loss += batch_loss;
        }

        let val_loss = dataset_loss(&model, val_ds, cfg.lambda_tv)?;
        if !val_loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch,
                step: cfg.batches_per_epoch,
                detail: "validation pass".into(),
            });
        }
        let is_best = val_loss < best_val;
        if is_best {
            best_val = val_loss;
            best_epoch = epoch;
            best_params.copy_from_slice(model.params().values());
            best_buffers.copy_from_slice(model.buffers().values());
        }
        history.epochs.push(EpochRecord {
            epoch,
            train_loss: epoch_loss / cfg.batches_per_epoch as f64,
            val_loss,
            lr: schedule.lr,
            is_best,
        });
        schedule.observe(val_loss);
    }

    // Best (deployment) checkpoint.
    let mut best_model = ArcNet::build(cfg.model.clone(), cfg.seed)?;
    best_model
        .params_mut()
        .values_mut()
        .copy_from_slice(&best_params);
    best_model
        .buffers_mut()
        .values_mut()
        .copy_from_slice(&best_buffers);
    let best = Checkpoint::from_model(
        &best_model,
        CheckpointMeta {
            epoch: best_epoch,
            val_loss: best_val,
            seed: cfg.seed,
            note: format!("best-of-{}-epochs", cfg.epochs),
        },
    );

    // Last checkpoint with the optimizer and schedule state for resuming.
    let mut last = Checkpoint::from_model(
        &model,
        CheckpointMeta {
            epoch: cfg.epochs,
            val_loss: history
                .epochs
                .last()
                .map(|r| r.val_loss)
                .unwrap_or(f64::NAN),
            seed: cfg.seed,
            note: "resumable".into(),
        },
    );
    last.push_extra("adam.m", vec![adam.m.len()], adam.m.clone());
    last.push_extra("adam.v", vec![adam.v.len()], adam.v.clone());
    last.push_extra("adam.t", vec![1], vec![adam.t as f64]);
    last.push_extra(
        "schedule",
        vec![4],
        vec![
            schedule.lr,
            schedule.best,
            schedule.since_best as f64,
            schedule.reductions as f64,
        ],
    );
    last.push_extra("best.params", vec![best_params.len()], best_params);
    last.push_extra("best.buffers", vec![best_buffers.len()], best_buffers);
    last.push_extra("best.val", vec![1], vec![best_val]);
    last.push_extra("best.epoch", vec![1], vec![best_epoch as f64]);

    Ok(TrainOutcome {
        best,
        last,
        history,
    })
}

/// Wall-clock report for a pullback inference run.
#[derive(Clone, Copy, Debug)]
pub struct InferTiming {
    pub frames: usize,
    pub total: Duration,
    pub ms_per_frame: f64,
}

impl std::fmt::Display for InferTiming {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} frames in {:.3} s ({:.2} ms/frame)",
            self.frames,
            self.total.as_secs_f64(),
            self.ms_per_frame
        )
    }
}

/// Classify every frame of a pullback in order, reporting throughput.
pub fn infer(ds: &PullbackDataset, model: &ArcNet) -> Result<(Vec<Logits>, InferTiming)> {
    if ds.is_empty() {
        return Ok((
            Vec::new(),
            InferTiming {
                frames: 0,
                total: Duration::ZERO,
                ms_per_frame: 0.0,
            },
        ));
    }
    let cfg = model.config();
    check_dataset_against_model(std::slice::from_ref(ds), cfg)?;
    let start = Instant::now();
    let results = par::map_indexed(ds.len(), |t| -> Result<Logits> {
        let pair = data::make_input_stack(ds, t, cfg.rho, cfg.theta)?;
        Ok(model.forward_infer(&[pair])?.into_iter().next().unwrap())
    });
    let mut logits = Vec::with_capacity(ds.len());
    for r in results {
        logits.push(r?);
    }
    let total = start.elapsed();
    let timing = InferTiming {
        frames: ds.len(),
        total,
        ms_per_frame: total.as_secs_f64() * 1000.0 / ds.len() as f64,
    };
    Ok((logits, timing))
}
