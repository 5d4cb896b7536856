mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sidn_core::Error;

#[derive(Debug, Parser)]
#[command(name = "sidn", version, about = "Script identification in scene-text images")]
pub struct Cli {
    /// Flat `key = value` file; command-line flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for batch parallelism.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic multi-script corpus with a manifest.
    SynthData(SynthArgs),
    /// Train a model and write a checkpoint plus metrics log.
    Train(TrainArgs),
    /// Accuracy, NLL and confusion matrix on a labeled manifest.
    Eval(EvalArgs),
    /// Classify one image.
    Predict(PredictArgs),
    /// Write an attention heat map for one image.
    AttnMap(AttnMapArgs),
    /// Compare analytic and finite-difference gradients.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub per_class: Option<usize>,
    #[arg(long)]
    pub min_width: Option<usize>,
    #[arg(long)]
    pub max_width: Option<usize>,
    #[arg(long)]
    pub min_height: Option<usize>,
    #[arg(long)]
    pub max_height: Option<usize>,
    #[arg(long)]
    pub noise: Option<f64>,
    /// Also write stratified `train.tsv`, `val.tsv` and `test.tsv`, e.g.
    /// `0.8,0.1,0.1`.
    #[arg(long)]
    pub split: Option<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Validation manifest for periodic held-out accuracy.
    #[arg(long)]
    pub val_manifest: Option<PathBuf>,
    /// Expected class count; checked against the manifest.
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Defaults to the checkpoint path with a `.metrics.jsonl` extension.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub clip_norm: Option<f64>,
    #[arg(long)]
    pub max_patches: Option<usize>,
    /// full, variant1 or variant2.
    #[arg(long)]
    pub variant: Option<String>,
    /// standard or compact.
    #[arg(long)]
    pub arch: Option<String>,
    /// 3 for color, 1 for grayscale.
    #[arg(long)]
    pub channels: Option<usize>,
    #[arg(long)]
    pub augment: bool,
    #[arg(long)]
    pub eval_every: Option<usize>,
    /// Print a progress line to stderr every this many iterations.
    #[arg(long)]
    pub log_every: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub image: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AttnMapArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub image: Option<PathBuf>,
    /// `.pgm` writes a binary graymap, anything else PNG.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// model, encoder, lstm, attention, fusion or all.
    #[arg(long)]
    pub module: Option<String>,
    #[arg(long)]
    pub samples: Option<usize>,
    /// Defaults to 1e-3 for the whole model and 1e-4 per module.
    #[arg(long)]
    pub tolerance: Option<f64>,
    #[arg(long)]
    pub variant: Option<String>,
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Usage(_) | Error::Config(_) => 1,
        Error::NumericFault(_) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
