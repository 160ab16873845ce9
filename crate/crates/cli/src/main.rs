mod commands;
mod config;
mod table;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(
    name = "bke",
    version,
    about = "Self-supervised pretraining and batch knowledge ensembling fine-tuning"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic two-blob dataset with a train/test split.
    Synth(SynthArgs),
    /// Phase I: self-supervised pretraining.
    Pretrain(PretrainArgs),
    /// Phase II: fine-tuning with batch knowledge ensembling.
    Finetune(FinetuneArgs),
    /// Evaluate a fine-tuned checkpoint.
    Eval(EvalArgs),
    /// Compute soft targets from feature and logit CSV files.
    Propagate(PropagateArgs),
    /// Fine-tune over a hyperparameter grid.
    Sweep(SweepArgs),
    /// Compare loss gradients against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
pub struct Common {
    /// JSON run configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Seed for every random stream.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args)]
pub struct DataArgs {
    /// Dataset container directory.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Split manifest (JSON) selecting train and test images.
    #[arg(long)]
    pub split: Option<PathBuf>,
}

#[derive(Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub train_per_class: usize,
    #[arg(long, default_value_t = 100)]
    pub test_per_class: usize,
    #[arg(long, default_value_t = 16)]
    pub side: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args)]
pub struct SslFlags {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub zeta: Option<f64>,
}

#[derive(Args)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub ssl: SslFlags,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum Method {
    Closed,
    Iter,
}

#[derive(Args)]
pub struct BkeFlags {
    #[arg(long)]
    pub omega: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long = "lambda")]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long, value_enum)]
    pub method: Option<Method>,
    /// Steps for `--method iter`.
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub positive_class: Option<usize>,
    #[arg(long)]
    pub eval_window: Option<usize>,
    /// Share of each class's training images to use.
    #[arg(long)]
    pub fraction: Option<f64>,
}

#[derive(Args)]
pub struct FinetuneArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub data: DataArgs,
    /// Phase I checkpoint.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[command(flatten)]
    pub bke: BkeFlags,
}

#[derive(Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub data: DataArgs,
    /// Fine-tuned checkpoint.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub positive_class: Option<usize>,
}

#[derive(Args)]
pub struct PropagateArgs {
    #[command(flatten)]
    pub common: Common,
    /// CSV with one feature row per sample.
    #[arg(long)]
    pub features: PathBuf,
    /// CSV with one logit row per sample.
    #[arg(long)]
    pub logits: PathBuf,
    #[arg(long)]
    pub omega: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long, value_enum)]
    pub method: Option<Method>,
    #[arg(long)]
    pub iters: Option<usize>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Grid {
    Omega,
    BatchSize,
    Tau,
    Lambda,
    All,
}

#[derive(Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[command(flatten)]
    pub bke: BkeFlags,
    #[arg(long, value_enum, default_value = "all")]
    pub grid: Grid,
    /// Comma-separated values replacing the preset grid (single grids only).
    #[arg(long, value_delimiter = ',')]
    pub values: Option<Vec<f64>>,
}

#[derive(Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Offset added to every analytic gradient component; for negative
    /// controls only.
    #[arg(long, default_value_t = 0.0)]
    pub perturb: f64,
    /// Optional directory for a JSON report.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn configure_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("BKE_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| anyhow::anyhow!("BKE_THREADS must be a positive integer, got {v:?}"))?;
        if n == 0 {
            anyhow::bail!("BKE_THREADS must be >= 1");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    configure_threads()?;
    match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Pretrain(a) => commands::pretrain(a),
        Command::Finetune(a) => commands::finetune(a),
        Command::Eval(a) => commands::eval(a),
        Command::Propagate(a) => commands::propagate(a),
        Command::Sweep(a) => commands::sweep(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
