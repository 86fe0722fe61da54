//! Command-line pipeline for OCT attenuation-artifact detection.
//!
//! Subcommands: `phantom` (synthesize a dataset), `train`, `eval`, `infer`
//! and `render`. Every command is deterministic given explicit seeds; config
//! files are JSON and individual flags override their fields (flags win).

use anyhow::{bail, Context};
use arcnet::checkpoint::Checkpoint;
use arcnet::data::{self, phantom::PhantomConfig, PullbackDataset};
use arcnet::metrics::MetricsReport;
use arcnet::model::Variant;
use arcnet::training::{self, TrainConfig};
use arcnet::ArtifactClass;
use clap::{Args, Parser, Subcommand};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "arcnet",
    about = "A-line attenuation-artifact detection for intracoronary OCT",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic phantom dataset with exact ground truth.
    Phantom(PhantomArgs),
    /// Train a model on a dataset manifest.
    Train(TrainArgs),
    /// Evaluate a checkpoint and write the metrics report.
    Eval(EvalArgs),
    /// Classify every frame of each pullback and report throughput.
    Infer(InferArgs),
    /// Render the annotation-ring overlay for one frame.
    Render(RenderArgs),
}

#[derive(Args)]
struct PhantomArgs {
    /// Phantom configuration (JSON); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for the dataset tree.
    #[arg(long)]
    out: PathBuf,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the number of pullbacks.
    #[arg(long)]
    pullbacks: Option<usize>,
    /// Override the frames per pullback.
    #[arg(long)]
    frames: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset manifest to train on.
    #[arg(long)]
    manifest: PathBuf,
    /// Output directory (checkpoints + history).
    #[arg(long)]
    out: PathBuf,
    /// Training configuration (JSON); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Architecture variant.
    #[arg(long, value_parser = parse_variant)]
    variant: Option<Variant>,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Hold out this fraction of patients for validation.
    #[arg(long, default_value_t = 0.15)]
    val_fraction: f64,
    /// Use a separate manifest for validation instead of splitting.
    #[arg(long)]
    val_manifest: Option<PathBuf>,
    /// Resume from a `last.ckpt` written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Override the number of epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Override the batches per epoch.
    #[arg(long)]
    batches_per_epoch: Option<usize>,
    /// Override the batch size.
    #[arg(long)]
    batch_size: Option<usize>,
    /// Override the initial learning rate.
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Metrics report destination (text).
    #[arg(long)]
    out: PathBuf,
    /// Minimum circular run length for frame-level positivity.
    #[arg(long, default_value_t = 1)]
    min_run: usize,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output directory for per-pullback prediction CSVs.
    #[arg(long)]
    out: PathBuf,
    /// Restrict to one pullback id.
    #[arg(long)]
    pullback: Option<String>,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    pullback: String,
    /// Frame index within the pullback.
    #[arg(long)]
    frame: usize,
    /// Output PNG path.
    #[arg(long)]
    out: PathBuf,
    /// Reuse predictions from `infer` (CSV) instead of running the model.
    #[arg(long)]
    predictions: Option<PathBuf>,
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    Variant::parse(s).map_err(|e| e.to_string())
}

fn read_json<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> anyhow::Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))
        }
    }
}

fn load_for_model(
    manifest: &Path,
    cfg: &arcnet::model::ArcNetConfig,
) -> anyhow::Result<Vec<PullbackDataset>> {
    let datasets = data::load_dataset(manifest, cfg.height, cfg.theta)
        .with_context(|| format!("loading {}", manifest.display()))?;
    if datasets.is_empty() {
        bail!("{}: manifest lists no pullbacks", manifest.display());
    }
    Ok(datasets)
}

fn cmd_phantom(args: PhantomArgs) -> anyhow::Result<()> {
    let mut cfg: PhantomConfig = read_json(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(p) = args.pullbacks {
        cfg.pullbacks = p;
    }
    if let Some(f) = args.frames {
        cfg.frames_per_pullback = f;
    }
    let pullbacks = data::phantom::generate_dataset(&cfg)?;
    let manifest = data::write_dataset(&args.out, &pullbacks)?;
    let frames: usize = pullbacks.iter().map(|p| p.frames.len()).sum();
    println!(
        "wrote {} pullbacks ({} frames, {}x{} px, {} A-lines) to {}",
        pullbacks.len(),
        frames,
        cfg.image_size,
        cfg.image_size,
        cfg.n_alines,
        manifest.display()
    );
    Ok(())
}

fn cmd_train(args: TrainArgs) -> anyhow::Result<()> {
    let mut cfg: TrainConfig = read_json(args.config.as_deref())?;
    if let Some(v) = args.variant {
        cfg.model.variant = v;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(e) = args.epochs {
        cfg.epochs = e;
    }
    if let Some(b) = args.batches_per_epoch {
        cfg.batches_per_epoch = b;
    }
    if let Some(b) = args.batch_size {
        cfg.batch_size = b;
    }
    if let Some(lr) = args.lr {
        cfg.lr0 = lr;
    }

    let all = load_for_model(&args.manifest, &cfg.model)?;
    let (train_ds, val_ds): (Vec<_>, Vec<_>) = match &args.val_manifest {
        Some(vm) => (all, load_for_model(vm, &cfg.model)?),
        None => {
            let (ti, vi) = data::split_by_patient(&all, args.val_fraction, cfg.seed);
            if vi.is_empty() {
                bail!("validation split is empty; provide more patients or --val-manifest");
            }
            (
                ti.iter().map(|&i| all[i].clone()).collect(),
                vi.iter().map(|&i| all[i].clone()).collect(),
            )
        }
    };
    let resume = match &args.resume {
        Some(p) => Some(Checkpoint::load(p)?),
        None => None,
    };

    {
        let probe = arcnet::model::ArcNet::build(cfg.model.clone(), cfg.seed)?;
        println!("{}", probe.parameter_report());
    }
    println!(
        "training {} on {} pullbacks ({} frames), validating on {} pullbacks",
        cfg.model.variant,
        train_ds.len(),
        train_ds.iter().map(|d| d.len()).sum::<usize>(),
        val_ds.len()
    );
    let out = training::train_from(&train_ds, &val_ds, &cfg, resume.as_ref())?;

    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let best_path = args.out.join("best.ckpt");
    let last_path = args.out.join("last.ckpt");
    out.best.save(&best_path)?;
    out.last.save(&last_path)?;
    fs::write(args.out.join("history.tsv"), out.history.to_text())
        .with_context(|| "writing history.tsv")?;
    println!(
        "best validation loss {:.6} at epoch {}; wrote {} and {}",
        out.best.meta.val_loss,
        out.best.meta.epoch,
        best_path.display(),
        last_path.display()
    );
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> anyhow::Result<()> {
    let ck = Checkpoint::load(&args.checkpoint)?;
    let model = ck.restore_model()?;
    let datasets = load_for_model(&args.manifest, model.config())?;
    let predictions = training::predict_dataset(&model, &datasets)?;
    let report = MetricsReport::compute(&predictions, args.min_run)?;
    let text = report.to_text();
    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).ok();
        }
    }
    fs::write(&args.out, &text).with_context(|| format!("writing {}", args.out.display()))?;
    print!("{text}");
    println!("report written to {}", args.out.display());
    Ok(())
}

fn predictions_csv(labels: &[Vec<ArtifactClass>]) -> String {
    let mut out = String::new();
    for row in labels {
        let mut first = true;
        for c in row {
            if !first {
                out.push(',');
            }
            let _ = write!(out, "{}", c.index());
            first = false;
        }
        out.push('\n');
    }
    out
}

fn cmd_infer(args: InferArgs) -> anyhow::Result<()> {
    let ck = Checkpoint::load(&args.checkpoint)?;
    let model = ck.restore_model()?;
    let mut datasets = load_for_model(&args.manifest, model.config())?;
    if let Some(id) = &args.pullback {
        datasets.retain(|d| &d.pullback_id == id);
        if datasets.is_empty() {
            bail!("pullback '{id}' not found in manifest");
        }
    }
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let mut total_frames = 0usize;
    let mut total_secs = 0.0f64;
    for ds in &datasets {
        let (logits, timing) = training::infer(ds, &model)?;
        let labels: Vec<Vec<ArtifactClass>> = logits
            .iter()
            .map(|l| {
                l.argmax()
                    .into_iter()
                    .map(|c| ArtifactClass::from_u8(c as u8).unwrap())
                    .collect()
            })
            .collect();
        let path = args.out.join(format!("{}_predictions.csv", ds.pullback_id));
        fs::write(&path, predictions_csv(&labels))
            .with_context(|| format!("writing {}", path.display()))?;
        println!("{}: {timing}", ds.pullback_id);
        total_frames += timing.frames;
        total_secs += timing.total.as_secs_f64();
    }
    if total_frames > 0 {
        println!(
            "total: {} frames in {:.3} s ({:.2} ms/frame)",
            total_frames,
            total_secs,
            total_secs * 1000.0 / total_frames as f64
        );
    }
    Ok(())
}

fn read_predictions_csv(path: &Path, theta: usize) -> anyhow::Result<Vec<Vec<ArtifactClass>>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: Vec<ArtifactClass> = line
            .split(',')
            .map(|t| {
                t.trim()
                    .parse::<u8>()
                    .ok()
                    .and_then(ArtifactClass::from_u8)
                    .with_context(|| format!("{}:{}: bad label '{t}'", path.display(), lineno + 1))
            })
            .collect::<anyhow::Result<_>>()?;
        if row.len() != theta {
            bail!(
                "{}:{}: {} labels, expected {theta}",
                path.display(),
                lineno + 1,
                row.len()
            );
        }
        rows.push(row);
    }
    Ok(rows)
}

fn write_png(path: &Path, img: &arcnet::render::RgbImage) -> anyhow::Result<()> {
    let file = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut encoder = png::Encoder::new(
        std::io::BufWriter::new(file),
        img.width as u32,
        img.height as u32,
    );
    encoder.set_color(png::ColorType::Rgb);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder.write_header()?;
    writer.write_image_data(&img.pixels)?;
    Ok(())
}

fn cmd_render(args: RenderArgs) -> anyhow::Result<()> {
    let ck = Checkpoint::load(&args.checkpoint)?;
    let model = ck.restore_model()?;
    let datasets = load_for_model(&args.manifest, model.config())?;
    let ds = datasets
        .iter()
        .find(|d| d.pullback_id == args.pullback)
        .with_context(|| format!("pullback '{}' not found in manifest", args.pullback))?;
    if args.frame >= ds.len() {
        bail!(
            "frame {} out of range for pullback {} ({} frames)",
            args.frame,
            args.pullback,
            ds.len()
        );
    }
    let predicted: Vec<ArtifactClass> = match &args.predictions {
        Some(p) => {
            let rows = read_predictions_csv(p, model.config().theta)?;
            rows.get(args.frame)
                .with_context(|| format!("{}: no row for frame {}", p.display(), args.frame))?
                .clone()
        }
        None => {
            let pair =
                data::make_input_stack(ds, args.frame, model.config().rho, model.config().theta)?;
            let logits = model.forward_infer(&[pair])?;
            logits[0]
                .argmax()
                .into_iter()
                .map(|c| ArtifactClass::from_u8(c as u8).unwrap())
                .collect()
        }
    };
    let img =
        arcnet::render::render_overlay(&ds.frames[args.frame], &ds.labels[args.frame], &predicted)?;
    write_png(&args.out, &img)?;
    println!(
        "rendered {} frame {} to {} (outer ring = reference, inner = prediction)",
        args.pullback,
        args.frame,
        args.out.display()
    );
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Phantom(a) => cmd_phantom(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Infer(a) => cmd_infer(a),
        Command::Render(a) => cmd_render(a),
    };
    if let Err(e) = result {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
