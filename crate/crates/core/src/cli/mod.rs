//! The `ord2seq` command-line tool.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error, 3 non-finite
//! training loss.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::DEFAULT_LR;
use crate::training::{ModelShape, TrainConfig, Variant};

mod commands;
pub mod experiments;
pub mod manifest;

pub use experiments::{AblationReport, SweepRow};
pub use manifest::{RunManifest, MANIFEST_FILE};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NAN: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "ord2seq", version, about = "Ordinal regression as binary label sequence prediction", args_override_self = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Subcommand, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Command {
    /// Generate a synthetic ordinal dataset (CSV splits plus a JSON sidecar).
    Generate(GenerateArgs),
    /// Train one model and write checkpoint, metrics and per-epoch log.
    Train(TrainArgs),
    /// Score a checkpoint on a data split.
    Evaluate(EvaluateArgs),
    /// Greedy-decode one sample, optionally tracing every step.
    Decode(DecodeArgs),
    /// Train the full model over a grid of mask factors and seeds.
    SweepAlpha(SweepArgs),
    /// Compare the four variants over several seeds.
    Ablation(AblationArgs),
    /// Print the dichotomic tree for N categories as JSON.
    Tree(TreeArgs),
    /// Find the noise level giving a target Bayes accuracy.
    CalibrateNoise(CalibrateArgs),
    /// Score the Bayes classifier on a data split.
    Oracle(OracleArgs),
    /// Re-run a manifest and check its artifacts are reproduced bit for bit.
    Replay(ReplayArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Optimiser and model size flags shared by every training command.
#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct HyperArgs {
    #[arg(long, default_value_t = 50)]
    pub epochs: usize,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = DEFAULT_LR)]
    pub lr: f64,
    #[arg(long, default_value_t = 64)]
    pub width: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    #[arg(long, default_value_t = 128)]
    pub ff_width: usize,
    #[arg(long, default_value_t = 64)]
    pub encoder_hidden: usize,
    #[arg(long, default_value_t = 4)]
    pub encoder_tokens: usize,
    /// Use one output head for every decoding step.
    #[arg(long)]
    pub shared_head: bool,
}

impl HyperArgs {
    pub fn train_config(&self, categories: usize, alpha: f64, seed: u64, variant: Variant) -> TrainConfig {
        TrainConfig {
            categories,
            alpha,
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            seed,
            variant,
            model: ModelShape {
                width: self.width,
                heads: self.heads,
                layers: self.layers,
                ff_width: self.ff_width,
                encoder_hidden: self.encoder_hidden,
                encoder_tokens: self.encoder_tokens,
                shared_head: self.shared_head,
            },
        }
    }
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct GenerateArgs {
    #[arg(long)]
    pub categories: usize,
    #[arg(long, default_value_t = 8)]
    pub feature_dim: usize,
    /// Standard deviation of the label noise.
    #[arg(long, default_value_t = 0.0, conflicts_with = "target_accuracy")]
    pub noise: f64,
    /// Pick the noise so the Bayes classifier reaches this accuracy.
    #[arg(long)]
    pub target_accuracy: Option<f64>,
    /// Geometric class priors with this ratio (uniform if omitted).
    #[arg(long)]
    pub geometric: Option<f64>,
    #[arg(long, default_value_t = 2000)]
    pub train_samples: usize,
    #[arg(long, default_value_t = 500)]
    pub val_samples: usize,
    #[arg(long, default_value_t = 2000)]
    pub test_samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Write only the JSON sidecar; splits are regenerated from it on load.
    #[arg(long)]
    pub spec_only: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub categories: usize,
    #[arg(long, default_value_t = crate::decoder::DEFAULT_ALPHA)]
    pub alpha: f64,
    #[arg(long, value_enum, default_value_t = Variant::Full)]
    pub variant: Variant,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// JSON data sidecar written by `generate`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    pub hyper: HyperArgs,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = Split::Test)]
    pub split: Split,
    /// Override the mask factor stored in the checkpoint.
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct DecodeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Comma-separated feature vector.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, conflicts_with_all = ["data", "index"])]
    pub features: Vec<f64>,
    #[arg(long, requires = "index")]
    pub data: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Split::Test)]
    pub split: Split,
    #[arg(long, requires = "data")]
    pub index: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Also write one JSON record per decoding step to trace.jsonl.
    #[arg(long)]
    pub trace: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SweepArgs {
    #[arg(long)]
    pub categories: usize,
    #[arg(long)]
    pub data: PathBuf,
    /// Mask factors to train with; 0 is run as 1e-6.
    #[arg(long, value_delimiter = ',', default_value = "0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9")]
    pub alphas: Vec<f64>,
    /// Number of seeds, counted up from --seed.
    #[arg(long, default_value_t = 3)]
    pub seeds: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    pub hyper: HyperArgs,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct AblationArgs {
    #[arg(long)]
    pub categories: usize,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = crate::decoder::DEFAULT_ALPHA)]
    pub alpha: f64,
    /// Number of seeds (at least 3), counted up from --seed.
    #[arg(long, default_value_t = 3)]
    pub seeds: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    pub hyper: HyperArgs,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct TreeArgs {
    #[arg(long)]
    pub categories: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub categories: usize,
    #[arg(long, default_value_t = 0.85)]
    pub target: f64,
    #[arg(long, default_value_t = 8)]
    pub feature_dim: usize,
    #[arg(long)]
    pub geometric: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct OracleArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = Split::Test)]
    pub split: Split,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct ReplayArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Directory for the replayed artifacts (default: `replay/` next to the manifest).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl Command {
    /// Points the command's output at `out`.
    pub fn with_out(&self, out: PathBuf) -> Command {
        let mut c = self.clone();
        match &mut c {
            Command::Generate(a) => a.out = out,
            Command::Train(a) => a.out = out,
            Command::Evaluate(a) => a.out = out,
            Command::Decode(a) => a.out = out,
            Command::SweepAlpha(a) => a.out = out,
            Command::Ablation(a) => a.out = out,
            Command::Tree(a) => a.out = Some(out),
            Command::CalibrateNoise(a) => a.out = Some(out),
            Command::Oracle(a) => a.out = Some(out),
            Command::Replay(a) => a.out = Some(out),
        }
        c
    }
}

/// Exit code for an error returned by a command.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::InvalidCategoryCount(_)
        | Error::InvalidCategory { .. }
        | Error::InvalidPath(_)
        | Error::InvalidPrefix { .. }
        | Error::Config(_)
        | Error::Spec(_) => EXIT_USAGE,
        Error::NanLoss { .. } => EXIT_NAN,
        Error::PartialAblation { cause, .. } => match exit_code(cause) {
            EXIT_NAN => EXIT_NAN,
            _ => EXIT_FAILURE,
        },
        _ => EXIT_FAILURE,
    }
}

/// Runs one parsed command.
pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Generate(a) => commands::generate(a),
        Command::Train(a) => commands::train(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Decode(a) => commands::decode(a),
        Command::SweepAlpha(a) => commands::sweep_alpha(a),
        Command::Ablation(a) => commands::ablation(a),
        Command::Tree(a) => commands::tree(a),
        Command::CalibrateNoise(a) => commands::calibrate_noise(a),
        Command::Oracle(a) => commands::oracle(a),
        Command::Replay(a) => commands::replay(a),
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn canonical(path: &Path) -> Result<PathBuf> {
    std::fs::canonicalize(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn check_categories(n: usize) -> Result<()> {
    if n < 2 {
        return Err(Error::InvalidCategoryCount(n));
    }
    Ok(())
}
