mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ddunet_core::data::synthetic::{generate_synthetic_with, SyntheticSpec};
use ddunet_core::model::{DdunetConfig, DdunetModel, ModelVariant};
use ddunet_core::trainer::{evaluate, predict_to_dir, train, EvalConfig, TrainConfig};
use ddunet_core::{Aggregation, LossWeights, Result};
use settings::{parse_alphas, ConfigFile};

/// Lightweight dual-dynamic U-Net cloud segmentation.
#[derive(Parser)]
#[command(name = "ddunet", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoints plus a loss log.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the dataset's test split.
    Eval(EvalArgs),
    /// Write predicted masks for every image in a dataset.
    Predict(PredictArgs),
    /// Print the trainable parameter count and a per-component breakdown.
    Params(ParamsArgs),
    /// Run the finite-difference gradient verification suite.
    Gradcheck,
    /// Generate a synthetic dataset in the standard layout.
    Synth(SynthArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset root containing images/ and GTmaps/.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory for checkpoints and the log.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long = "batch-size")]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long = "lr-gamma")]
    lr_gamma: Option<f64>,
    #[arg(long = "base-channels")]
    base_channels: Option<usize>,
    #[arg(long = "image-size")]
    image_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Test share of the split (0.1 = train:test 9:1).
    #[arg(long = "val-ratio")]
    val_ratio: Option<f64>,
    #[arg(long)]
    threshold: Option<f64>,
    /// Deep-supervision weights, finest first, e.g. "1,0.5,0.2".
    #[arg(long)]
    alphas: Option<String>,
    /// Model variant: "full" or "baseline".
    #[arg(long)]
    variant: Option<String>,
    /// Split each day/night/synthetic group separately.
    #[arg(long)]
    stratify: bool,
    /// Random horizontal flips during training.
    #[arg(long)]
    hflip: bool,
    /// Bypass the 3x3 fuse conv inside the multi-scale blocks.
    #[arg(long = "skip-fuse")]
    skip_fuse: bool,
    /// Force bit-reproducible single-threaded execution.
    #[arg(long)]
    deterministic: bool,
    /// key=value file; explicit flags override file entries.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    /// Checkpoint to evaluate.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Must match the checkpoint when given.
    #[arg(long = "base-channels")]
    base_channels: Option<usize>,
    /// Must match the checkpoint when given.
    #[arg(long = "image-size")]
    image_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long = "val-ratio")]
    val_ratio: Option<f64>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long = "batch-size")]
    batch_size: Option<usize>,
    /// "per_image_mean" or "global".
    #[arg(long)]
    aggregation: Option<String>,
    #[arg(long)]
    stratify: bool,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Directory for the predicted {0, 255} masks.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long = "batch-size")]
    batch_size: Option<usize>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct ParamsArgs {
    #[arg(long = "base-channels")]
    base_channels: Option<usize>,
    #[arg(long = "image-size")]
    image_size: Option<usize>,
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    /// Number of image/mask pairs.
    #[arg(long)]
    count: Option<usize>,
    /// Square image edge in pixels.
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Blob count range "lo,hi"; "0,0" renders pure background.
    #[arg(long)]
    blobs: Option<String>,
    #[arg(long)]
    config: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Predict(args) => cmd_predict(args),
        Command::Params(args) => cmd_params(args),
        Command::Gradcheck => cmd_gradcheck(),
        Command::Synth(args) => cmd_synth(args),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let file = ConfigFile::load_opt(args.config.as_ref())?;
    let data: PathBuf = file.require("data", args.data)?;
    let out: PathBuf = file.require("out", args.out)?;
    let mut config = TrainConfig::new(data, out);
    config.epochs = file.resolve("epochs", args.epochs, config.epochs)?;
    config.batch_size = file.resolve("batch_size", args.batch_size, config.batch_size)?;
    config.lr = file.resolve("lr", args.lr, config.lr)?;
    config.lr_gamma = file.resolve("lr_gamma", args.lr_gamma, config.lr_gamma)?;
    config.base_channels = file.resolve("base_channels", args.base_channels, config.base_channels)?;
    config.input_size = file.resolve("image_size", args.image_size, config.input_size)?;
    config.seed = file.resolve("seed", args.seed, config.seed)?;
    config.val_ratio = file.resolve("val_ratio", args.val_ratio, config.val_ratio)?;
    config.threshold = file.resolve("threshold", args.threshold, config.threshold)?;
    if let Some(text) = file.resolve_opt("alphas", args.alphas)? {
        config.loss_weights = LossWeights::new(parse_alphas(&text)?)?;
    }
    if let Some(name) = file.resolve_opt("variant", args.variant)? {
        config.variant = ModelVariant::parse(&name)?;
    }
    if let Some(agg) = file.resolve_opt::<String>("aggregation", None)? {
        config.aggregation = Aggregation::parse(&agg)?;
    }
    config.stratify = file.resolve_flag("stratify", args.stratify)?;
    config.augment_hflip = file.resolve_flag("hflip", args.hflip)?;
    config.dmsc_skip_fuse = file.resolve_flag("skip_fuse", args.skip_fuse)?;
    config.deterministic = file.resolve_flag("deterministic", args.deterministic)?;
    config.progress = true;

    let outcome = train(&config)?;
    println!("final_checkpoint={}", outcome.final_checkpoint.display());
    println!("best_checkpoint={}", outcome.best_checkpoint.display());
    println!("log={}", outcome.log_path.display());
    if outcome.best_miou.is_finite() {
        println!("best_miou={:.6}", outcome.best_miou);
    }
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let file = ConfigFile::load_opt(args.config.as_ref())?;
    let data: PathBuf = file.require("data", args.data)?;
    let ckpt: PathBuf = file.require("ckpt", args.ckpt)?;
    let mut config = EvalConfig::new(data, ckpt);
    config.base_channels = file.resolve_opt("base_channels", args.base_channels)?;
    config.input_size = file.resolve_opt("image_size", args.image_size)?;
    config.seed = file.resolve("seed", args.seed, config.seed)?;
    config.val_ratio = file.resolve("val_ratio", args.val_ratio, config.val_ratio)?;
    config.threshold = file.resolve("threshold", args.threshold, config.threshold)?;
    config.batch_size = file.resolve("batch_size", args.batch_size, config.batch_size)?;
    if let Some(agg) = file.resolve_opt("aggregation", args.aggregation)? {
        config.aggregation = Aggregation::parse(&agg)?;
    }
    config.stratify = file.resolve_flag("stratify", args.stratify)?;

    let outcome = evaluate(&config)?;
    println!("{}", outcome.overall);
    for (tag, report) in &outcome.per_tag {
        println!();
        println!("tag={}", tag.as_str());
        println!("{report}");
    }
    Ok(())
}

fn cmd_predict(args: PredictArgs) -> Result<()> {
    let file = ConfigFile::load_opt(args.config.as_ref())?;
    let data: PathBuf = file.require("data", args.data)?;
    let ckpt: PathBuf = file.require("ckpt", args.ckpt)?;
    let out: PathBuf = file.require("out", args.out)?;
    let threshold = file.resolve("threshold", args.threshold, 0.5)?;
    let batch = file.resolve("batch_size", args.batch_size, 16)?;
    let n = predict_to_dir(&ckpt, &data, &out, threshold, batch)?;
    println!("masks_written={n}");
    println!("out={}", out.display());
    Ok(())
}

fn cmd_params(args: ParamsArgs) -> Result<()> {
    let file = ConfigFile::load_opt(args.config.as_ref())?;
    let config = DdunetConfig {
        base_channels: file.resolve("base_channels", args.base_channels, 8)?,
        input_size: file.resolve("image_size", args.image_size, 256)?,
        dmsc_skip_fuse: false,
        variant: match file.resolve_opt("variant", args.variant)? {
            Some(name) => ModelVariant::parse(&name)?,
            None => ModelVariant::Full,
        },
    };
    let model = DdunetModel::<f32>::new(config, 0)?;
    let (total, breakdown) = model.count_parameters();
    println!("total={total}");
    println!("total_millions={:.3}", total as f64 / 1e6);
    for (component, count) in breakdown {
        println!("{component}={count}");
    }
    Ok(())
}

fn cmd_gradcheck() -> Result<()> {
    let report = ddunet_core::gradcheck::run_default_suite()?;
    print!("{report}");
    if report.all_pass() {
        println!("gradcheck=pass cases={}", report.cases.len());
        Ok(())
    } else {
        Err(ddunet_core::Error::Contract(
            "gradient check failed; see case list above".to_string(),
        ))
    }
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let file = ConfigFile::load_opt(args.config.as_ref())?;
    let out: PathBuf = file.require("out", args.out)?;
    let mut spec = SyntheticSpec::new(
        file.resolve("count", args.count, 64)?,
        file.resolve("size", args.size, 48)?,
        file.resolve("seed", args.seed, 42)?,
    );
    if let Some(text) = file.resolve_opt("blobs", args.blobs)? {
        let parts: Vec<&str> = text.split(',').map(str::trim).collect();
        if parts.len() != 2 {
            return Err(ddunet_core::Error::Config(format!(
                "blob range needs \"lo,hi\", got {text:?}"
            )));
        }
        spec.blobs = (
            parts[0]
                .parse()
                .map_err(|_| ddunet_core::Error::Config("bad blob lower bound".into()))?,
            parts[1]
                .parse()
                .map_err(|_| ddunet_core::Error::Config("bad blob upper bound".into()))?,
        );
    }
    let index = generate_synthetic_with(&spec, &out)?;
    println!("generated={}", index.len());
    println!("train={} test={}", index.train.len(), index.test.len());
    println!("out={}", out.display());
    Ok(())
}
