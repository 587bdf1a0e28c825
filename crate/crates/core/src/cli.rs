//! The `transdae` command line: argument parsing and the subcommand bodies.
//!
//! Every subcommand returns a [`Result`]; [`main_with_args`] turns an error
//! into a message on stderr and the matching exit code.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use transdae_tensor::Tensor;

use crate::bench::run_bench;
use crate::data::{batch_iter, file_name, Dataset, SynthSpec};
use crate::error::{Context, Error, Result};
use crate::gradcheck::{run_gradcheck, GradcheckOptions};
use crate::io::{load_checkpoint, read_mask, read_tensor_file, save_checkpoint, write_mask};
use crate::metrics::{evaluate, EvalReport, LabelMask};
use crate::model::{Model, ModelConfig, SIZE_DIVISOR};
use crate::train::{TrainConfig, Trainer};

/// Environment variable that replaces the seed of any command.
pub const SEED_ENV: &str = "TDAE_SEED";

#[derive(Debug, Parser)]
#[command(name = "transdae", version, about = "Train, evaluate and inspect dual-attention segmentation networks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset directory.
    Synth(SynthArgs),
    /// Train a model and write checkpoints plus a run log.
    Train(TrainArgs),
    /// Score a checkpoint (or saved predictions) against a dataset.
    Eval(EvalArgs),
    /// Write the predicted label mask for one image.
    Predict(PredictArgs),
    /// Finite-difference check of every block and the end-to-end model.
    Gradcheck(GradcheckArgs),
    /// FLOP counts and wall times for the attention kernels.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output dataset directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 16)]
    pub count: usize,
    /// JSON file with a synthetic-data spec; defaults apply to missing fields.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// JSON training configuration (ignored when resuming).
    #[arg(long, required_unless_present = "resume")]
    pub config: Option<PathBuf>,
    /// Training dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Validation dataset directory; the training set is used when absent.
    #[arg(long)]
    pub val: Option<PathBuf>,
    /// Directory receiving `last.ckpt`, `best.ckpt` and `run_log.json`.
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Suppress the per-epoch progress lines.
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, required_unless_present = "predictions", conflicts_with = "predictions")]
    pub checkpoint: Option<PathBuf>,
    /// Directory of saved `NNNN.tdae` masks to score instead of running a model.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    /// Report path; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Write the model's predicted masks to this directory.
    #[arg(long)]
    pub save_predictions: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Image tensor file, `(H, W, C)` or `(1, H, W, C)`.
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// JSON model configuration for the end-to-end check (tiny model by default).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of sampled parameter coordinates in the end-to-end check.
    #[arg(long)]
    pub coords: Option<usize>,
    /// Scale the backward rule of this op family by 1.5 (harness self-test).
    #[arg(long)]
    pub inject_fault: Option<String>,
    /// Report path; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Token counts.
    #[arg(long, value_delimiter = ',', default_values_t = [64, 128, 256, 512, 1024])]
    pub n: Vec<usize>,
    #[arg(long, default_value_t = 32)]
    pub d: usize,
    /// Reduction ratios for the reduced kernel.
    #[arg(long = "ratios", value_delimiter = ',', default_values_t = [1, 2, 4])]
    pub ratios: Vec<usize>,
    #[arg(long, default_value_t = 1)]
    pub heads: usize,
    /// Timed repetitions per row (the minimum is reported).
    #[arg(long, default_value_t = 3)]
    pub reps: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    /// CSV path; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Write fitted exponents and ratios as JSON here.
    #[arg(long)]
    pub summary: Option<PathBuf>,
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn main_with_args<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Predict(a) => cmd_predict(&a),
        Command::Gradcheck(a) => cmd_gradcheck(&a),
        Command::Bench(a) => cmd_bench(&a),
    }
}

/// `TDAE_SEED` if set, else `fallback`.
pub fn seed_override(fallback: u64) -> Result<u64> {
    match std::env::var(SEED_ENV) {
        Ok(s) => s
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("{SEED_ENV} must be an unsigned integer, got {s:?}"))),
        Err(_) => Ok(fallback),
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).at(path.display().to_string())?;
    serde_json::from_str(&text).at(path.display().to_string())
}

fn emit_json<T: Serialize>(value: &T, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match out {
        Some(p) => fs::write(p, text + "\n").at(p.display().to_string()),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let mut spec: SynthSpec = match &a.spec {
        Some(p) => read_json(p)?,
        None => SynthSpec::default(),
    };
    spec.seed = seed_override(a.seed.unwrap_or(spec.seed))?;
    let data = Dataset::synthesize(&spec, a.count)?;
    data.save(&a.out)?;
    eprintln!("wrote {} samples to {}", data.len(), a.out.display());
    Ok(())
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let train = Dataset::load(&a.data)?;
    let val = match &a.val {
        Some(p) => Dataset::load(p)?,
        None => train.clone(),
    };
    let mut trainer = match &a.resume {
        Some(p) => {
            let ckpt = load_checkpoint::<f32>(p, None)?;
            Trainer::resume(&ckpt)?
        }
        None => {
            let path = a
                .config
                .as_deref()
                .ok_or_else(|| Error::Config("train needs --config or --resume".into()))?;
            let mut cfg: TrainConfig = read_json(path)?;
            cfg.seed = seed_override(cfg.seed)?;
            Trainer::new(cfg)?
        }
    };
    check_compatible(&trainer.model.config, &train)?;
    check_compatible(&trainer.model.config, &val)?;
    fs::create_dir_all(&a.out).at(a.out.display().to_string())?;
    let last = a.out.join("last.ckpt");
    let best = a.out.join("best.ckpt");
    let quiet = a.quiet;
    let log = trainer.run(&train, &val, |t| {
        let ckpt = t.checkpoint();
        save_checkpoint(&last, &ckpt)?;
        if t.best_epoch == t.epoch {
            save_checkpoint(&best, &ckpt)?;
        }
        if !quiet {
            if let Some(e) = t.history.last() {
                eprintln!(
                    "epoch {:>4}  train_loss {:.5}  val_loss {:.5}  val_dice {:.4}  {:.1}s",
                    e.epoch, e.train_loss, e.val_loss, e.val_dice, e.wall_seconds
                );
            }
        }
        Ok(())
    })?;
    emit_json(&log, Some(&a.out.join("run_log.json")))?;
    eprintln!(
        "stopped ({:?}) after {} epochs; best val dice {:.4} at epoch {}",
        log.stop_reason,
        trainer.epoch,
        log.best_val_dice,
        log.best_epoch
    );
    Ok(())
}

fn check_compatible(cfg: &ModelConfig, data: &Dataset) -> Result<()> {
    let m = &data.manifest;
    if m.size != cfg.input_size || m.in_channels != cfg.in_channels || m.num_classes > cfg.num_classes {
        return Err(Error::Contract(format!(
            "dataset has {}x{} images with {} channel(s) and {} classes; the model expects {}x{} with {} channel(s) and {} classes",
            m.size.0,
            m.size.1,
            m.in_channels,
            m.num_classes,
            cfg.input_size.0,
            cfg.input_size.1,
            cfg.in_channels,
            cfg.num_classes
        )));
    }
    Ok(())
}

/// Runs `model` over the whole dataset in batches.
pub fn predict_dataset(model: &Model<f32>, data: &Dataset, batch_size: usize) -> Result<Vec<LabelMask>> {
    let mut preds = Vec::with_capacity(data.len());
    for batch in batch_iter(data.len(), batch_size, None)? {
        preds.extend(model.predict(&data.images::<f32>(&batch)?)?);
    }
    Ok(preds)
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let data = Dataset::load(&a.data)?;
    let (preds, num_classes) = match (&a.checkpoint, &a.predictions) {
        (Some(ckpt), _) => {
            let model = load_checkpoint::<f32>(ckpt, None)?.model()?;
            check_compatible(&model.config, &data)?;
            let preds = predict_dataset(&model, &data, a.batch_size)?;
            (preds, model.config.num_classes)
        }
        (None, Some(dir)) => {
            let preds = (0..data.len())
                .map(|i| read_mask(&prediction_path(dir, i)))
                .collect::<Result<Vec<_>>>()?;
            (preds, data.manifest.num_classes)
        }
        (None, None) => return Err(Error::Config("eval needs --checkpoint or --predictions".into())),
    };
    if let Some(dir) = &a.save_predictions {
        fs::create_dir_all(dir).at(dir.display().to_string())?;
        for (i, p) in preds.iter().enumerate() {
            write_mask(&dir.join(file_name(i)), p)?;
        }
    }
    let report: EvalReport = evaluate(&preds, &data.masks(), num_classes, None)?;
    emit_json(&report, a.out.as_deref())
}

/// Accepts both a flat directory of masks and a dataset directory.
fn prediction_path(dir: &Path, index: usize) -> PathBuf {
    let flat = dir.join(file_name(index));
    if flat.exists() {
        flat
    } else {
        dir.join("masks").join(file_name(index))
    }
}

fn cmd_predict(a: &PredictArgs) -> Result<()> {
    let model = load_checkpoint::<f32>(&a.checkpoint, None)?.model()?;
    let image: Tensor<f32> = read_tensor_file(&a.image)?.to_tensor_lossy()?;
    let image = as_single_batch(image)?;
    let (h, w) = (image.shape()[1], image.shape()[2]);
    if h % SIZE_DIVISOR != 0 || w % SIZE_DIVISOR != 0 {
        return Err(Error::Config(format!(
            "image is {h}x{w}; both sides must be multiples of {SIZE_DIVISOR}"
        )));
    }
    let mask = model.predict(&image)?.remove(0);
    write_mask(&a.out, &mask)
}

fn as_single_batch(image: Tensor<f32>) -> Result<Tensor<f32>> {
    let s = image.shape().to_vec();
    match s.len() {
        3 => Ok(image.reshape([1, s[0], s[1], s[2]])?),
        4 if s[0] == 1 => Ok(image),
        _ => Err(Error::Config(format!(
            "expected an (H, W, C) image or a batch of one, got shape {s:?}"
        ))),
    }
}

fn cmd_gradcheck(a: &GradcheckArgs) -> Result<()> {
    let mut opts = GradcheckOptions::default();
    if let Some(p) = &a.config {
        opts.model = read_json(p)?;
    }
    if let Some(c) = a.coords {
        opts.model_coords = c;
    }
    opts.seed = seed_override(a.seed.unwrap_or(opts.seed))?;
    opts.inject_fault = a.inject_fault.clone();
    let report = run_gradcheck(&opts)?;
    emit_json(&report, a.out.as_deref())?;
    if !report.passed {
        let failed: Vec<&str> = report
            .components
            .iter()
            .filter(|c| !c.passed)
            .map(|c| c.component.as_str())
            .collect();
        return Err(Error::Numeric(format!(
            "gradient check above tolerance {} for: {}",
            report.tolerance,
            failed.join(", ")
        )));
    }
    Ok(())
}

fn cmd_bench(a: &BenchArgs) -> Result<()> {
    let seed = seed_override(a.seed.unwrap_or(0))?;
    let report = run_bench(&a.n, a.d, &a.ratios, a.heads, a.reps, seed)?;
    let csv = report.to_csv();
    match &a.out {
        Some(p) => fs::write(p, &csv).at(p.display().to_string())?,
        None => print!("{csv}"),
    }
    match &a.summary {
        Some(p) => emit_json(&report.summary, Some(p)),
        None => {
            eprintln!("{}", serde_json::to_string(&report.summary)?);
            Ok(())
        }
    }
}
