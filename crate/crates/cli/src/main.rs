mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ctxrec::backbones::BackboneKind;
use ctxrec::error::Error;
use ctxrec::training::{Task, Variant};

use crate::config::ProviderKind;

/// Retrieval-augmented in-context features for recommendation backbones.
#[derive(Debug, Parser)]
#[command(name = "ctxrec", version, about)]
pub struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Root seed; every random stream is derived from it.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub output: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic interaction log with hidden genre structure.
    Synth(SynthArgs),
    /// Split a raw interaction log and sample negatives.
    PrepareData(PrepareArgs),
    /// Sample the in-context pool and attach chain-of-thought outputs.
    BuildCotStore(StoreArgs),
    /// Train a model and write a run directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split.
    Evaluate(EvaluateArgs),
    /// Sweep context lengths and the unbalanced cell.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub users: Option<usize>,
    #[arg(long)]
    pub items: Option<usize>,
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    /// Newline-delimited JSON interaction log.
    #[arg(long)]
    pub input: PathBuf,
    /// Keep interactions on or after this day (UTC, YYYY-MM-DD).
    #[arg(long)]
    pub since: Option<String>,
    /// Keep interactions on or before this day (UTC, YYYY-MM-DD).
    #[arg(long)]
    pub until: Option<String>,
}

#[derive(Debug, Args)]
pub struct StoreArgs {
    /// Directory written by prepare-data.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub ratio: Option<f64>,
    #[arg(long, value_enum)]
    pub provider: Option<ProviderKind>,
    /// Label signal of the synthetic provider, in [0, 1].
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub noise: Option<f64>,
    /// Embedding pack keyed by decimal example id, for the file provider.
    #[arg(long)]
    pub cot_pack: Option<PathBuf>,
    /// Optional JSONL of `{"id", "cot_text"}` for the file provider.
    #[arg(long)]
    pub cot_texts: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub encoder: Option<ProviderKind>,
    /// Embedding pack keyed by rendered text for the file encoder.
    #[arg(long)]
    pub encoder_pack: Option<PathBuf>,
    #[arg(long)]
    pub d_text: Option<usize>,
    /// Inverted lists for approximate search.
    #[arg(long)]
    pub lists: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Directory written by prepare-data.
    #[arg(long)]
    pub data: PathBuf,
    /// Directory written by build-cot-store.
    #[arg(long)]
    pub store: PathBuf,
    #[arg(long)]
    pub task: Option<Task>,
    #[arg(long)]
    pub variant: Option<Variant>,
    #[arg(long)]
    pub backbone: Option<BackboneKind>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub probes: Option<usize>,
    #[arg(long)]
    pub clip_norm: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// In-context examples per query.
    #[arg(long)]
    pub k: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub store: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = "test", value_parser = ["train", "valid", "test"])]
    pub split: String,
    /// Baseline AUC for RelaImpr.
    #[arg(long)]
    pub base_auc: Option<f64>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Context lengths, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub ks: Option<Vec<usize>>,
    /// Skip the K = 4 cell without label balancing.
    #[arg(long)]
    pub no_unbalanced_cell: bool,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 1,
        Error::Io { .. } | Error::Data(_) | Error::Metric(_) => 2,
        Error::Numerical(_) => 3,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match commands::dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
