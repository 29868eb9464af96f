//! `deepball` command-line tool: synthesize, train, detect, calibrate,
//! evaluate and benchmark.

mod output;
mod overlay;

use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use deepball::dataio::{self, AugmentConfig, SynthConfig};
use deepball::detector::{calibrate_threshold, decode, DecodeConfig};
use deepball::eval::{self, Interpolation, DEFAULT_TOLERANCE_PX};
use deepball::model::{build_model, Checkpoint, Model, ModelConfig};
use deepball::trainer::{infer_frames, EpochSummary, StepRecord, TrainConfig, TrainObserver, Trainer};

use output::{sha256_file, sha256_hex, AtomicFile, StagedDir};

#[derive(Parser, Debug)]
#[command(
    name = "deepball",
    version,
    about = "Ball detection with a small fully convolutional network"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a detector on an annotated manifest.
    Train(TrainArgs),
    /// Detect balls in one image.
    Detect(DetectArgs),
    /// Accuracy and AP on an annotated manifest.
    Eval(EvalArgs),
    /// Pick the confidence threshold with the best accuracy.
    Calibrate(CalibrateArgs),
    /// Time forward pass plus decoding.
    Bench(BenchArgs),
    /// Write synthetic pitch frames and their manifest.
    Synth(SynthArgs),
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out_checkpoint: PathBuf,
    #[arg(long, default_value_t = 75)]
    epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    no_augment: bool,
    #[arg(long)]
    no_hypercolumn: bool,
    /// Training crop after augmentation, HxW.
    #[arg(long, value_parser = parse_size, default_value = "512x512")]
    crop: (usize, usize),
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// Epoch after which the learning rate drops tenfold [default: two thirds of --epochs].
    #[arg(long)]
    lr_drop_epoch: Option<usize>,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Validation manifest; the best-accuracy model goes to `<out>.best`.
    #[arg(long)]
    val_manifest: Option<PathBuf>,
    /// Training log file [default: standard output].
    #[arg(long)]
    log: Option<PathBuf>,
    /// Overwrite the output checkpoint every N epochs (0 = only at the end).
    #[arg(long, default_value_t = 0)]
    checkpoint_every: usize,
    /// Continue a run from a checkpoint written by `train`.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct DetectArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    theta: f32,
    #[arg(long, default_value_t = 1)]
    max_balls: usize,
    /// Suppression half-width in map cells.
    #[arg(long, default_value_t = 3)]
    radius: usize,
    /// Write the frame with the ball map blended over it.
    #[arg(long)]
    overlay: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    theta: f32,
    #[arg(long, default_value_t = DEFAULT_TOLERANCE_PX)]
    tol: f64,
    /// Use raw instead of interpolated precision for AP.
    #[arg(long)]
    raw_precision: bool,
    /// Per-frame outcomes as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Also time inference at this size (HxW) and report fps.
    #[arg(long, value_parser = parse_size)]
    bench_size: Option<(usize, usize)>,
}

#[derive(Args, Debug)]
struct CalibrateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = DEFAULT_TOLERANCE_PX)]
    tol: f64,
}

#[derive(Args, Debug)]
struct BenchArgs {
    /// Without a checkpoint a freshly initialized model is timed.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    no_hypercolumn: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_parser = parse_size, default_value = "1080x1920")]
    size: (usize, usize),
    #[arg(long, default_value_t = 20)]
    iters: usize,
    #[arg(long, default_value_t = 2)]
    warmup: usize,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 64)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_parser = parse_size, default_value = "256x256")]
    size: (usize, usize),
}

fn parse_size(s: &str) -> std::result::Result<(usize, usize), String> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected HxW, got `{s}`"))?;
    let parse = |v: &str| {
        v.trim()
            .parse::<usize>()
            .map_err(|_| format!("`{v}` is not a positive integer"))
    };
    let (h, w) = (parse(h)?, parse(w)?);
    if h == 0 || w == 0 {
        return Err("sizes must be positive".into());
    }
    Ok((h, w))
}

fn banner(command: &str, seed: Option<u64>, config: &serde_json::Value, checkpoint: Option<&str>) -> Result<()> {
    let mut line = format!("deepball {command}");
    if let Some(s) = seed {
        line.push_str(&format!(" seed={s}"));
    }
    line.push_str(&format!(" config={}", serde_json::to_string(config)?));
    if let Some(h) = checkpoint {
        line.push_str(&format!(" checkpoint=sha256:{h}"));
    }
    eprintln!("{line}");
    Ok(())
}

fn load_model(path: &Path) -> Result<(Model, String)> {
    let hash = sha256_file(path)?;
    let model = Model::load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    Ok((model, hash))
}

fn load_frames(manifest: &Path) -> Result<Vec<dataio::AnnotatedFrame>> {
    dataio::load_dataset(manifest).with_context(|| format!("loading dataset {}", manifest.display()))
}

struct TrainLog<'a> {
    out: Box<dyn Write + 'a>,
    checkpoint: &'a Path,
    every: usize,
}

impl TrainObserver for TrainLog<'_> {
    fn on_step(&mut self, record: &StepRecord) -> deepball::Result<()> {
        writeln!(self.out, "{record}")?;
        Ok(())
    }

    fn on_epoch(&mut self, trainer: &Trainer, summary: &EpochSummary) -> deepball::Result<()> {
        match summary.validation {
            Some((acc, theta)) => eprintln!(
                "epoch {} mean_loss {:.6} val_accuracy {acc:.4} val_theta {theta:.2}",
                summary.epoch, summary.mean_loss
            ),
            None => eprintln!("epoch {} mean_loss {:.6}", summary.epoch, summary.mean_loss),
        }
        self.out.flush()?;
        if self.every > 0 && summary.epoch.is_multiple_of(self.every) && summary.epoch < trainer.config.total_epochs {
            trainer.to_checkpoint().save(self.checkpoint)?;
        }
        Ok(())
    }
}

fn best_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".best");
    PathBuf::from(s)
}

fn train(args: TrainArgs) -> Result<()> {
    let mut config = TrainConfig {
        initial_lr: args.lr,
        batch_size: args.batch_size,
        seed: args.seed,
        workers: args.workers,
        augment: if args.no_augment {
            None
        } else {
            Some(AugmentConfig::with_crop(args.crop.0, args.crop.1))
        },
        ..TrainConfig::with_epochs(args.epochs)
    };
    if let Some(e) = args.lr_drop_epoch {
        config.lr_drop_epoch = e;
    }
    let data = load_frames(&args.manifest)?;
    let validation = args.val_manifest.as_deref().map(load_frames).transpose()?;

    let model_config = ModelConfig {
        hypercolumn: !args.no_hypercolumn,
        ..ModelConfig::default()
    };
    let (mut trainer, start_hash) = match &args.resume {
        Some(path) => {
            let hash = sha256_file(path)?;
            let ck = Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
            if ck.header.config != model_config {
                bail!(
                    "checkpoint {} holds a {:?} model but the flags ask for {:?}",
                    path.display(),
                    ck.header.config,
                    model_config
                );
            }
            (Trainer::from_checkpoint(&ck, config.clone())?, Some(hash))
        }
        None => (
            Trainer::new(build_model(model_config, args.seed)?, config.clone())?,
            None,
        ),
    };
    let settings = serde_json::json!({ "model": model_config, "train": config, "frames": data.len() });
    banner("train", Some(args.seed), &settings, start_hash.as_deref())?;

    let log_file = args.log.as_deref().map(AtomicFile::create).transpose()?;
    let stdout = io::stdout();
    let out: Box<dyn Write> = match &log_file {
        Some(f) => Box::new(f.writer()?),
        None => Box::new(stdout.lock()),
    };
    let mut observer = TrainLog {
        out,
        checkpoint: &args.out_checkpoint,
        every: args.checkpoint_every,
    };
    let report = trainer.fit(&data, validation.as_deref(), &mut observer)?;
    drop(observer);

    trainer.to_checkpoint().save(&args.out_checkpoint)?;
    eprintln!(
        "final checkpoint {} sha256:{}",
        args.out_checkpoint.display(),
        sha256_file(&args.out_checkpoint)?
    );
    if let Some((epoch, acc, model)) = &report.best {
        let path = best_path(&args.out_checkpoint);
        model.save_checkpoint(&path)?;
        let last = report.epochs.last().and_then(|e| e.validation).map_or(0.0, |v| v.0);
        eprintln!(
            "best validation accuracy {acc:.4} at epoch {epoch} -> {} (final epoch {last:.4})",
            path.display()
        );
    }
    if let Some(f) = log_file {
        f.commit()?;
    }
    Ok(())
}

fn detect(args: DetectArgs) -> Result<()> {
    let (model, hash) = load_model(&args.checkpoint)?;
    let cfg = DecodeConfig {
        theta: args.theta,
        max_detections: args.max_balls,
        suppression_radius: args.radius,
    };
    banner("detect", None, &serde_json::to_value(cfg)?, Some(&hash))?;
    let image = dataio::load_image(&args.image)?;
    let (h, w) = (image.height() as usize, image.width() as usize);
    let x = dataio::normalize_image(&image, &model.input_norm());
    let conf = model.infer(&x)?;
    let detections = decode(&conf, 0, h, w, &cfg)?;
    if let Some(path) = &args.overlay {
        let img = overlay::render(&image, &conf, &detections);
        AtomicFile::write_with(path, |p| {
            img.save_with_format(p, image::ImageFormat::Png)
                .with_context(|| format!("writing overlay {}", p.display()))
        })?;
    }
    let mut out = io::stdout().lock();
    for d in &detections {
        writeln!(out, "{} {} {:.6}", d.x_p, d.y_p, d.confidence)?;
    }
    Ok(())
}

fn evaluate(args: EvalArgs) -> Result<()> {
    let (model, hash) = load_model(&args.checkpoint)?;
    let mode = if args.raw_precision {
        Interpolation::Raw
    } else {
        Interpolation::Interpolated
    };
    let settings =
        serde_json::json!({ "theta": args.theta, "tolerance_px": args.tol, "interpolation": format!("{mode:?}") });
    banner("eval", None, &settings, Some(&hash))?;
    let data = load_frames(&args.manifest)?;
    let frames = infer_frames(&model, &data)?;
    let mut report = eval::evaluate(&frames, args.theta, args.tol, mode)?;
    if let Some((h, w)) = args.bench_size {
        report.fps = Some(eval::benchmark(&model, h, w, 2, 10)?);
    }
    if let Some(path) = &args.csv {
        AtomicFile::write_with(path, |p| {
            let f = std::fs::File::create(p)?;
            let mut buf = io::BufWriter::new(f);
            report.write_csv(&mut buf)?;
            buf.flush()?;
            Ok(())
        })?;
    }
    println!("{report}");
    Ok(())
}

fn calibrate(args: CalibrateArgs) -> Result<()> {
    let (model, hash) = load_model(&args.checkpoint)?;
    banner(
        "calibrate",
        None,
        &serde_json::json!({ "tolerance_px": args.tol }),
        Some(&hash),
    )?;
    let data = load_frames(&args.manifest)?;
    let frames = infer_frames(&model, &data)?;
    let theta = calibrate_threshold(&frames, args.tol)?;
    println!("{theta:.2}");
    Ok(())
}

fn bench(args: BenchArgs) -> Result<()> {
    let (model, hash) = match &args.checkpoint {
        Some(p) => {
            let (m, h) = load_model(p)?;
            (m, Some(h))
        }
        None => {
            let cfg = ModelConfig {
                hypercolumn: !args.no_hypercolumn,
                ..ModelConfig::default()
            };
            (build_model(cfg, args.seed)?, None)
        }
    };
    if args.iters == 0 {
        bail!("--iters must be at least 1");
    }
    let settings = serde_json::json!({
        "model": model.config(),
        "size": [args.size.0, args.size.1],
        "iters": args.iters,
        "warmup": args.warmup,
    });
    banner(
        "bench",
        args.checkpoint.is_none().then_some(args.seed),
        &settings,
        hash.as_deref(),
    )?;
    let fps = eval::benchmark(&model, args.size.0, args.size.1, args.warmup, args.iters)?;
    println!("fps = {fps:.3}");
    println!("threads = 1");
    Ok(())
}

fn synth(args: SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        height: args.size.0,
        width: args.size.1,
        ..SynthConfig::default()
    };
    banner(
        "synth",
        Some(args.seed),
        &serde_json::json!({ "count": args.count, "synth": cfg }),
        None,
    )?;
    let frames = dataio::synthesize_dataset(&cfg, args.count, args.seed)?;
    let staged = StagedDir::create(&args.out_dir)?;
    let manifest = dataio::write_dataset(staged.path(), &frames)?;
    let bytes = std::fs::read(&manifest)?;
    staged.commit()?;
    eprintln!(
        "wrote {} frames to {} (manifest sha256:{})",
        frames.len(),
        args.out_dir.display(),
        sha256_hex(&bytes)
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::Detect(a) => detect(a),
        Command::Eval(a) => evaluate(a),
        Command::Calibrate(a) => calibrate(a),
        Command::Bench(a) => bench(a),
        Command::Synth(a) => synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
