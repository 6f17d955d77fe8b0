mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use niser::ErrorKind;

/// Session-based recommendation: synthesize, ingest, train, evaluate and analyse.
#[derive(Debug, Parser)]
#[command(name = "niser", version)]
pub struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Threads used for evaluation.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic click stream as an event CSV.
    Synth(SynthArgs),
    /// Turn raw events into a corpus file (vocabulary plus train/test sessions).
    Ingest(IngestArgs),
    /// Train one model per seed; writes checkpoints and training traces.
    Train(TrainArgs),
    /// Score a checkpoint on the corpus test split.
    Evaluate(EvaluateArgs),
    /// Embedding norm versus item popularity, by decile.
    BiasReport(BiasArgs),
    /// Daily retraining with next-day evaluation on new long-tail items.
    OnlineSim(OnlineArgs),
    /// Finite-difference check of a tiny random model's gradients.
    GradCheck(GradCheckArgs),
    /// Print the effective configuration as TOML.
    Config,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the ground-truth successor transitions.
    #[arg(long)]
    pub transitions: Option<PathBuf>,
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long)]
    pub sessions: Option<usize>,
    #[arg(long)]
    pub days: Option<usize>,
    #[arg(long)]
    pub new_items_per_day: Option<usize>,
    #[arg(long)]
    pub zipf: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[arg(long)]
    pub events: PathBuf,
    /// csv, tsv or jsonl; guessed from the extension when omitted.
    #[arg(long)]
    pub format: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
    /// Trailing days held out for testing (0 keeps everything for training).
    #[arg(long)]
    pub test_days: Option<usize>,
    #[arg(long)]
    pub min_item_support: Option<usize>,
    #[arg(long)]
    pub min_session_len: Option<usize>,
}

#[derive(Debug, Args, Default)]
pub struct ModelFlags {
    /// gnn, gnn+, nir, niser or niser+.
    #[arg(long)]
    pub variant: Option<String>,
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub tau: Option<usize>,
    #[arg(long)]
    pub max_len: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of models in the ensemble.
    #[arg(long)]
    pub seeds: Option<usize>,
    /// f32 or f64.
    #[arg(long)]
    pub precision: Option<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub model: ModelFlags,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BiasArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Output path prefix; `.json` and `.csv` are appended.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct OnlineArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub days: Option<usize>,
    #[arg(long)]
    pub initial_days: Option<usize>,
    #[arg(long)]
    pub phi_star: Option<f64>,
    #[command(flatten)]
    pub model: ModelFlags,
}

#[derive(Debug, Args)]
pub struct GradCheckArgs {
    #[arg(long, default_value = "niser+")]
    pub variant: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, thiserror::Error)]
#[error("{msg}")]
pub struct CliError {
    pub kind: ErrorKind,
    pub msg: String,
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        Self {
            kind: ErrorKind::Usage,
            msg: msg.into(),
        }
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Self {
            kind: ErrorKind::Data,
            msg: msg.into(),
        }
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Self {
            kind: ErrorKind::Numeric,
            msg: msg.into(),
        }
    }

    fn exit_code(&self) -> u8 {
        match self.kind {
            ErrorKind::Usage => 1,
            ErrorKind::Data => 2,
            ErrorKind::Numeric => 3,
        }
    }

    fn kind_name(&self) -> &'static str {
        match self.kind {
            ErrorKind::Usage => "usage",
            ErrorKind::Data => "data",
            ErrorKind::Numeric => "numeric",
        }
    }
}

impl From<niser::Error> for CliError {
    fn from(e: niser::Error) -> Self {
        Self {
            kind: e.kind(),
            msg: e.to_string(),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or_default().trim_start_matches("error: ");
            return report(CliError::usage(first.to_string()));
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => report(e),
    }
}

fn report(e: CliError) -> ExitCode {
    let msg = e.msg.split_whitespace().collect::<Vec<_>>().join(" ");
    eprintln!("error: kind={} msg={:?}", e.kind_name(), msg);
    ExitCode::from(e.exit_code())
}
