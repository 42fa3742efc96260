//! `bbvae` command-line tool.

mod commands;
mod inputs;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Bits-back compression with VAEs, and the encoder-training experiments
/// around it.
#[derive(Debug, Parser)]
#[command(name = "bbvae", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train encoder and decoder jointly; writes a checkpoint series and BPD metrics.
    Train(TrainArgs),
    /// Retrain only the encoder of a checkpoint with one of the objectives.
    FinetuneEncoder(FinetuneArgs),
    /// Amortized against optimal-inference test BPD for one or more checkpoints.
    Gap(GapArgs),
    /// Fresh encoders trained on data drawn from a pretrained model.
    Consistency(ConsistencyArgs),
    /// Bits-back compress a dataset.
    Compress(CompressArgs),
    /// Restore a dataset from a compressed stream.
    Decompress(DecompressArgs),
    /// Coded BPD and time per image over a sweep of K.
    Tradeoff(TradeoffArgs),
}

/// Flags every subcommand accepts.
#[derive(Debug, Args, Clone)]
pub struct Common {
    /// Flat `key = value` experiment config; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory (created if missing).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Random seed(s), comma separated.
    #[arg(long, value_delimiter = ',')]
    pub seed: Vec<u64>,
    /// MNIST directory; defaults to $BBVAE_DATA_ROOT, then ./data/mnist.
    #[arg(long)]
    pub data_root: Option<PathBuf>,
}

#[derive(Debug, Args, Clone)]
pub struct DataArgs {
    /// `binary-mnist`, `grey-mnist`, or a `.bbds` file.
    #[arg(long)]
    pub dataset: Option<String>,
    /// Held-out `.bbds` file when `--dataset` is a file.
    #[arg(long)]
    pub test_dataset: Option<PathBuf>,
    /// Use only the first N training items.
    #[arg(long)]
    pub n_train: Option<usize>,
    /// Use only the first N test items.
    #[arg(long)]
    pub n_test: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f32>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub latent: Option<usize>,
    /// Evaluate and save a checkpoint every N epochs (0: only at the end).
    #[arg(long, default_value_t = 100)]
    pub eval_every: usize,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// wake, sleep, reverse-sleep, half-asleep or denoising.
    #[arg(long)]
    pub objective: Option<String>,
    /// Model-sample share (half-asleep) or noisy-ELBO weight (denoising).
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Input noise level for denoising.
    #[arg(long)]
    pub sigma: Option<f32>,
    /// Latent source for model samples: prior or aggregate.
    #[arg(long, default_value = "prior")]
    pub source: String,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f32>,
    #[arg(long)]
    pub batch_size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct GapArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub data: DataArgs,
    /// One or more checkpoints, e.g. a training series.
    #[arg(long, num_args = 1..)]
    pub checkpoint: Vec<PathBuf>,
    /// Encoder epochs of optimal inference on the evaluation set.
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f32>,
    /// Noise draws per datum when measuring the gap.
    #[arg(long, default_value_t = 10)]
    pub n_noise: usize,
}

#[derive(Debug, Args)]
pub struct ConsistencyArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Objectives to compare, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub objective: Vec<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f32>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub n_train: Option<usize>,
    #[arg(long)]
    pub n_test: Option<usize>,
    /// Seed of the synthetic datasets.
    #[arg(long, default_value_t = 0)]
    pub data_seed: u64,
}

#[derive(Debug, Args)]
pub struct CompressArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Which MNIST split to compress.
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Posterior refinement steps per datum (0: amortized).
    #[arg(long)]
    pub k: Option<usize>,
    /// Learning rate of the refinement steps.
    #[arg(long)]
    pub lr: Option<f32>,
}

#[derive(Debug, Args)]
pub struct DecompressArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Compressed stream written by `compress`.
    #[arg(long)]
    pub input: PathBuf,
}

#[derive(Debug, Args)]
pub struct TradeoffArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Values of K: a list (`0,1,2,5,10`) or an inclusive range (`0..10`).
    #[arg(long)]
    pub k: Option<String>,
    #[arg(long)]
    pub lr: Option<f32>,
    /// Also decompress every stream and check it.
    #[arg(long)]
    pub verify: bool,
}

/// Failure with its exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub kind: &'static str,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            kind: "config",
            message: message.into(),
        }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self {
            code: 3,
            kind: "data",
            message: message.into(),
        }
    }
}

impl From<bbvae::Error> for CliError {
    fn from(e: bbvae::Error) -> Self {
        use bbvae::Error as E;
        let (code, kind) = match &e {
            E::Config(_) => (2, "config"),
            E::Parse { .. } | E::Domain(_) | E::Shape { .. } | E::Io(_) => (3, "data"),
            E::Stream(_) | E::Underflow(_) => (4, "stream"),
            E::NonFinite(_) | E::Tape(_) => (1, "numeric"),
        };
        Self {
            code,
            kind,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::data(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => commands::train(a),
        Command::FinetuneEncoder(a) => commands::finetune(a),
        Command::Gap(a) => commands::gap(a),
        Command::Consistency(a) => commands::consistency(a),
        Command::Compress(a) => commands::compress(a),
        Command::Decompress(a) => commands::decompress(a),
        Command::Tradeoff(a) => commands::tradeoff(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.message.replace(['\n', '\r'], " ");
            eprintln!("bbvae: error[{}]: {msg}", e.kind);
            ExitCode::from(e.code)
        }
    }
}
