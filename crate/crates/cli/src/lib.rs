//! The `dwd` command line: data generation, training, evaluation, the
//! ablation grid and report, terminal play and the HTTP game server.

pub mod commands;
pub mod config;
pub mod manifest;
pub mod play;
pub mod server;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

/// A mistake in how the tool was invoked, as opposed to a failure while
/// running. Reported with exit code 1.
#[derive(Debug)]
pub struct Usage(pub String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

/// Exit code for an error returned by [`run`].
pub fn exit_code(e: &anyhow::Error) -> i32 {
    if e.chain().any(|c| c.is::<Usage>()) {
        1
    } else {
        2
    }
}

#[derive(Parser, Debug)]
#[command(name = "dwd", version, about = "Desk-scale goal-driven dialog: train, evaluate and play")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Sample contrast-pair datasets and question corpora.
    GenData {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        seed: u64,
        /// Output directory (default: a new run directory under $DWD_DATA_DIR/data).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Held-out pairs (default: n / 10).
        #[arg(long)]
        val: Option<usize>,
    },
    /// Run one training stage.
    Train {
        #[arg(long)]
        stage: String,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        variant: Option<String>,
        /// Dataset directory from gen-data (stage1).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Starting checkpoint (stage2a, stage2b, stage2).
        #[arg(long)]
        init: Option<PathBuf>,
        /// `key=value` config override; may repeat.
        #[arg(long = "set")]
        set: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Roll a checkpoint out against the oracle answerer and score it.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        seed: u64,
        /// Named setting A..F; overrides the pool flags.
        #[arg(long)]
        setting: Option<String>,
        #[arg(long, default_value_t = 2)]
        pool_size: usize,
        #[arg(long, default_value_t = 5)]
        rounds: usize,
        #[arg(long, default_value = "random")]
        sampling: String,
        #[arg(long, default_value_t = 500)]
        n: usize,
        /// Dataset directory; its corpus trains (and caches) the metric LM.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        lm: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train every variant's curriculum and tabulate the metrics.
    Ablate {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set")]
        set: Vec<String>,
        /// Total stage-2 epochs per variant (default 25).
        #[arg(long)]
        stage2_epochs: Option<usize>,
        /// Comma-separated variant names (default: all six).
        #[arg(long)]
        variants: Option<String>,
        #[arg(long, default_value_t = 500)]
        n_pools: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate models on the setting grid.
    Report {
        #[arg(long, default_value = "default")]
        grid: String,
        #[arg(long)]
        seed: u64,
        /// Ablation output holding zero_shot, ours and typical checkpoints.
        #[arg(long)]
        from: Option<PathBuf>,
        /// Extra `name=path` checkpoint; may repeat.
        #[arg(long = "model")]
        models: Vec<String>,
        #[arg(long, default_value_t = 500)]
        n_pools: usize,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        lm: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Answer Q-bot's questions in the terminal.
    Play {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 4)]
        pool_size: usize,
        #[arg(long, default_value_t = 5)]
        rounds: usize,
        #[arg(long)]
        seed: Option<u64>,
        /// Transcript store directory for finished games.
        #[arg(long)]
        store: Option<PathBuf>,
    },
    /// Start the HTTP game service.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        /// `name=path` or a bare path; the first is the default model.
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<String>,
        #[arg(long)]
        store: Option<PathBuf>,
    },
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    commands::dispatch(cli.command)
}
