//! `ldrs` command-line front end.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use config::UsageError;

#[derive(Parser, Debug)]
#[command(name = "ldrs", version, about = "Latent diffusion image restoration")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic dataset of procedural images plus manifest.json.
    SynthData(SynthDataArgs),
    /// Apply a degradation recipe to one image or a directory of images.
    Degrade(DegradeArgs),
    /// Train encoder, denoiser, decoder and control branch from scratch.
    TrainBase(TrainBaseArgs),
    /// Train low-rank adapters on a frozen base checkpoint.
    TrainLora(TrainLoraArgs),
    /// Restore degraded images with prompt-guided sampling.
    Restore(RestoreArgs),
    /// Score `<id>.clean.pgm` / `<id>.restored.pgm` pairs into a CSV.
    Eval(EvalArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
}

fn is_false(b: &bool) -> bool {
    !*b
}

#[derive(Args, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
struct Common {
    /// JSON file with defaults; keys are flag names. Flags win.
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
}

#[derive(Args, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
struct SynthDataArgs {
    /// Output directory.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    out: Option<PathBuf>,
    /// Number of images.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    n: Option<usize>,
    /// Side length: 16, 32 or 64.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    size: Option<usize>,
    #[command(flatten)]
    #[serde(flatten)]
    common: Common,
}

#[derive(Args, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
struct DegradeArgs {
    /// Input image, or a directory of images.
    #[arg(long = "in")]
    #[serde(rename = "in", skip_serializing_if = "Option::is_none")]
    input: Option<PathBuf>,
    /// Output image, or a directory receiving `<id>.lq.*` and `<id>.clean.*`.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    out: Option<PathBuf>,
    /// Recipe such as "blur:2.0+sr:4" or "noise:15".
    #[arg(long, alias = "degrade")]
    #[serde(skip_serializing_if = "Option::is_none")]
    spec: Option<String>,
    #[command(flatten)]
    #[serde(flatten)]
    common: Common,
}

#[derive(Args, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
struct TrainBaseArgs {
    /// Dataset directory written by synth-data.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    data: Option<PathBuf>,
    /// Checkpoint to write.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    out: Option<PathBuf>,
    /// Per-step loss CSV.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    log: Option<PathBuf>,
    /// Continue from a checkpoint written by train-base.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    resume: Option<PathBuf>,
    /// Total optimizer steps.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    steps: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    batch: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    lr: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    weight_decay: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    recon_weight: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    neg_dropout: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    content_dropout: Option<f64>,
    /// Degradation recipes used round-robin per batch; repeatable.
    #[arg(long = "spec")]
    #[serde(skip_serializing_if = "Vec::is_empty")]
    specs: Vec<String>,
    /// Leave this family out of training.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    exclude_family: Option<String>,
    /// Diffusion steps T of the training schedule.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    schedule_steps: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    latent_channels: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    hidden: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    bottleneck: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    embed_dim: Option<usize>,
    /// Fill the wall_ms log column (makes logs run-dependent).
    #[arg(long)]
    #[serde(skip_serializing_if = "is_false")]
    record_time: bool,
    /// Disable the worker pool.
    #[arg(long)]
    #[serde(skip_serializing_if = "is_false")]
    sequential: bool,
    #[command(flatten)]
    #[serde(flatten)]
    common: Common,
}

#[derive(Args, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
struct TrainLoraArgs {
    /// Base checkpoint; never modified.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    base: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    data: Option<PathBuf>,
    /// Adapter checkpoint to write.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    log: Option<PathBuf>,
    /// Continue from a checkpoint written by train-lora.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    resume: Option<PathBuf>,
    /// Train only on this family.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    family: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    steps: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    batch: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    rank: Option<usize>,
    /// Parameter name patterns (`*` wildcard); repeatable.
    #[arg(long = "target")]
    #[serde(skip_serializing_if = "Vec::is_empty")]
    targets: Vec<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    reg_lambda: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    lr: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    weight_decay: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    spec: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    neg_dropout: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    content_dropout: Option<f64>,
    /// Adapter set name.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    set: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "is_false")]
    record_time: bool,
    #[arg(long)]
    #[serde(skip_serializing_if = "is_false")]
    sequential: bool,
    #[command(flatten)]
    #[serde(flatten)]
    common: Common,
}

#[derive(Args, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
struct RestoreArgs {
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    base: Option<PathBuf>,
    /// Adapter checkpoint; repeatable.
    #[arg(long)]
    #[serde(skip_serializing_if = "Vec::is_empty")]
    lora: Vec<PathBuf>,
    /// Degraded image, or a directory with --batch.
    #[arg(long = "in")]
    #[serde(rename = "in", skip_serializing_if = "Option::is_none")]
    input: Option<PathBuf>,
    /// Output image, or a directory receiving `<id>.restored.*` with --batch.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    out: Option<PathBuf>,
    /// Treat --in and --out as directories.
    #[arg(long)]
    #[serde(skip_serializing_if = "is_false")]
    batch: bool,
    /// Write per-image wall-clock times to this CSV.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    times: Option<PathBuf>,
    /// Positive prompts, e.g. "checkerboard,high-quality".
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pos: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    neg: Option<String>,
    /// Guidance scale.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    cfg: Option<f64>,
    /// Sampling steps.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    steps: Option<usize>,
    /// Mean-only updates instead of ancestral sampling.
    #[arg(long)]
    #[serde(skip_serializing_if = "is_false")]
    deterministic: bool,
    /// "latent" or "noise-prediction".
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    fusion: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "is_false")]
    sequential: bool,
    #[command(flatten)]
    #[serde(flatten)]
    common: Common,
}

#[derive(Args, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
struct EvalArgs {
    /// Directory of `<id>.clean.*` / `<id>.restored.*` pairs.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    dir: Option<PathBuf>,
    /// Base checkpoint for the perceptual proxy.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    base: Option<PathBuf>,
    /// CSV to write; stdout when absent.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    out: Option<PathBuf>,
    /// Times CSV written by `restore --times`.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    times: Option<PathBuf>,
    /// Label for the spec column.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    spec: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "is_false")]
    sequential: bool,
    #[command(flatten)]
    #[serde(flatten)]
    common: Common,
}

#[derive(Args, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
struct GradcheckArgs {
    #[command(flatten)]
    #[serde(flatten)]
    common: Common,
}

fn run(cmd: Command) -> anyhow::Result<()> {
    use config::resolve;
    match cmd {
        Command::SynthData(a) => commands::synth_data(resolve(a.common.config.as_deref(), &a)?),
        Command::Degrade(a) => commands::degrade(resolve(a.common.config.as_deref(), &a)?),
        Command::TrainBase(a) => commands::train_base(resolve(a.common.config.as_deref(), &a)?),
        Command::TrainLora(a) => commands::train_lora(resolve(a.common.config.as_deref(), &a)?),
        Command::Restore(a) => commands::restore(resolve(a.common.config.as_deref(), &a)?),
        Command::Eval(a) => commands::eval(resolve(a.common.config.as_deref(), &a)?),
        Command::Gradcheck(a) => commands::gradcheck(resolve(a.common.config.as_deref(), &a)?),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.downcast_ref::<UsageError>().is_some() => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
