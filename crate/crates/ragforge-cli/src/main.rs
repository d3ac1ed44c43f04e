//! `ragforge` — one binary wiring corpus building, training, evaluation,
//! retrieval, hard-negative mining, scenario comparison, and refresh-status
//! polling into reproducible commands.
//!
//! Exit codes: 0 on success, 1 on runtime failure, 2 on usage errors
//! (unknown flags or subcommands, missing required arguments).

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use ragforge_core::trainer::TrainMode;

#[derive(Parser)]
#[command(
    name = "ragforge",
    version,
    about = "Train and evaluate a retrieval-augmented generator with a refreshable passage index"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    End2end,
    Frozen,
}

impl From<ModeArg> for TrainMode {
    fn from(mode: ModeArg) -> TrainMode {
        match mode {
            ModeArg::End2end => TrainMode::End2end,
            ModeArg::Frozen => TrainMode::Frozen,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Build a knowledge base (passages, vocabulary, digests) from a
    /// documents JSONL file; optionally carries training examples through
    /// chunking so their gold passage ids stay valid.
    Ingest {
        /// Documents as JSONL: {"doc_id", "title", "body", "kind", "abstract_text"?}.
        #[arg(long)]
        docs: PathBuf,
        /// Output directory for the knowledge base and its manifest.
        #[arg(long)]
        out: PathBuf,
        /// Maximum body tokens per passage (titles not counted).
        #[arg(long, default_value_t = 100)]
        max_words: usize,
        /// Minimum words for a reconstruction statement to survive.
        #[arg(long, default_value_t = 15)]
        recon_min: usize,
        /// Maximum words for a reconstruction statement to survive.
        #[arg(long, default_value_t = 35)]
        recon_max: usize,
        /// Optional examples JSONL to filter and re-key alongside the build.
        #[arg(long)]
        examples: Option<PathBuf>,
    },
    /// Train the dual-encoder retriever and token generator.
    Train {
        /// JSON training configuration; absent keys take documented
        /// defaults, unknown keys warn, violations are reported together.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Knowledge-base directory produced by `ingest`.
        #[arg(long)]
        kb: PathBuf,
        /// Training examples JSONL.
        #[arg(long)]
        train: PathBuf,
        /// Validation examples JSONL.
        #[arg(long)]
        valid: PathBuf,
        /// Override the configured training mode.
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        /// Output directory: metrics log, refresh status, best checkpoint,
        /// run manifest.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a test split and write a JSON report.
    Eval {
        /// Checkpoint file produced by `train`.
        #[arg(long)]
        ckpt: PathBuf,
        /// Knowledge-base directory the checkpoint was trained against.
        #[arg(long)]
        kb: PathBuf,
        /// Test examples JSONL.
        #[arg(long)]
        test: PathBuf,
        /// Report file (JSON): EM, F1, Top-5, Top-20, digests.
        #[arg(long)]
        out: PathBuf,
    },
    /// Retrieve the top passages for a query under a checkpoint's encoders.
    Retrieve {
        /// Knowledge-base directory.
        #[arg(long)]
        kb: PathBuf,
        /// Checkpoint file supplying encoder parameters.
        #[arg(long)]
        ckpt: PathBuf,
        /// Query text.
        #[arg(long)]
        query: String,
        /// Number of passages to return.
        #[arg(short, default_value_t = 5)]
        k: usize,
    },
    /// Mine lexically hard negatives (high BM25 score, answer absent) for
    /// each QA example.
    MineNegatives {
        /// Knowledge-base directory.
        #[arg(long)]
        kb: PathBuf,
        /// QA examples JSONL.
        #[arg(long)]
        qa: PathBuf,
        /// Negatives to mine per example.
        #[arg(short, default_value_t = 7)]
        n: usize,
        /// Output JSONL: one record of negative passage ids per example.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the multi-scenario training comparison on the synthetic
    /// domain-shift task and write the results table as JSON.
    Compare {
        /// Task name; `synthetic` is the only built-in task.
        #[arg(long, default_value = "synthetic")]
        task: String,
        /// `all` or a comma-separated subset of: frozen-QA, end2end-QA,
        /// frozen-QA+R, end2end-QA+R, dpr-standalone-then-frozen.
        #[arg(long, default_value = "all")]
        scenarios: String,
        /// Number of seeds (runs seeds 0..N).
        #[arg(long, default_value_t = 3)]
        seeds: usize,
        /// Table file (JSON).
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the refresh status a training run is publishing.
    Status {
        /// Training output directory (the `train --out` directory).
        #[arg(long)]
        run: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match commands::dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
