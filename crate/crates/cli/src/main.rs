//! `ctxcite`: synthesise corpora, train, decode, score, ablate and export
//! attention heatmaps. Every command writes `manifest.json` into its output
//! directory.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 invalid flags or config.

mod commands;
mod config;
mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Runtime(format!("{}: {e}", path.display()))
    }

    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl From<ctxcite_core::Error> for CliError {
    fn from(e: ctxcite_core::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

#[derive(Parser)]
#[command(name = "ctxcite", version, about = "Citation-aware decoder pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug)]
pub struct Common {
    /// TOML config file, or a previous run's manifest.json.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides every seed in the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Dotted config override, e.g. `--set train.learning_rate=1e-3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus (train.jsonl and heldout.jsonl).
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        n_examples: Option<usize>,
        #[arg(long)]
        n_heldout: Option<usize>,
        #[arg(long)]
        n_docs: Option<usize>,
        #[arg(long)]
        facts_per_doc: Option<usize>,
    },
    /// Train a model; writes model.ckpt and train_log.jsonl.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        n_steps: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
        #[arg(long)]
        disable_fusion: bool,
        #[arg(long)]
        disable_attn: bool,
    },
    /// Decode every example of a corpus; writes generations.jsonl.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Only the first N examples.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Score generations (or the gold responses); writes metrics.json.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, conflicts_with = "gold", required_unless_present = "gold")]
        generations: Option<PathBuf>,
        /// Score the corpus' own gold responses.
        #[arg(long)]
        gold: bool,
        /// JSON judgments table replacing the fact-containment oracle.
        #[arg(long)]
        judgments: Option<PathBuf>,
        /// Also report teacher-forced router and marker accuracy of this model.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Train and evaluate the full model and both ablations; writes ablation.json.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        heldout: PathBuf,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        n_steps: Option<usize>,
    },
    /// Decode one example and export its last-layer attention heatmap.
    Heatmap {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// 0-based example index.
        #[arg(long, default_value_t = 0)]
        example: usize,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    match commands::run(cli.command) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
