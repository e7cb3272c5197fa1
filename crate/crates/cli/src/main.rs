//! `seedprop`: point-supervised small-target segmentation testbed.
//!
//! Verbs: generate, train, eval, soup, report, ledger-verify. Exit codes:
//! 0 success, 2 validation or ledger rejection, 3 numerical failure.

mod commands;
mod config;
mod ledger;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::ValidationError;

#[derive(Parser)]
#[command(name = "seedprop", version, about = "In-batch seed-affinity propagation testbed")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a frozen synthetic dataset with a hashed manifest.
    Generate {
        /// Scene spec TOML; defaults apply when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Number of scenes.
        #[arg(long)]
        n: usize,
        /// Master seed; scene i derives its own stream from (seed, i).
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a detector under the one-change ledger discipline.
    Train {
        /// Run config TOML; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset manifest (manifest.jsonl).
        #[arg(long)]
        dataset: PathBuf,
        /// Run output directory (traces, checkpoints).
        #[arg(long)]
        out: PathBuf,
        /// Ledger file (created on first run).
        #[arg(long)]
        ledger: PathBuf,
        /// Parent run id for the one-change rule.
        #[arg(long, conflicts_with = "root")]
        parent: Option<String>,
        /// Declare a baseline run with no parent.
        #[arg(long)]
        root: bool,
    },
    /// Evaluate a checkpoint on a dataset split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Binarization threshold override (default 0.55).
        #[arg(long)]
        threshold: Option<f64>,
        /// Split to evaluate: train, val, or all.
        #[arg(long, default_value = "val")]
        split: String,
        /// Write report files here.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Ledger to cross-check the checkpoint's recorded dataset.
        #[arg(long)]
        ledger: Option<PathBuf>,
        /// Dump per-scene affinity bundles (CSV grids) here.
        #[arg(long)]
        dump_affinity: Option<PathBuf>,
    },
    /// Combine checkpoints: equal averaging, greedy pair, or alpha sweep.
    Soup {
        /// Rule: equal, greedy, or sweep.
        #[arg(long)]
        rule: String,
        /// Checkpoint files to combine.
        #[arg(required = true)]
        checkpoints: Vec<PathBuf>,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Record the soup in this ledger.
        #[arg(long)]
        ledger: Option<PathBuf>,
        #[arg(long, default_value = "soup")]
        label: String,
    },
    /// Render summary tables, the failure map, and Pareto scatter data.
    Report {
        #[arg(long)]
        ledger: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check ledger integrity: unique ids, one-change rule, artifact hashes.
    LedgerVerify {
        #[arg(long)]
        ledger: PathBuf,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Generate { spec, n, seed, out } => {
            commands::cmd_generate(spec.as_deref(), n, seed, &out)
        }
        Command::Train { config, dataset, out, ledger, parent, root } => {
            commands::cmd_train(config.as_deref(), &dataset, &out, &ledger, parent.as_deref(), root)
        }
        Command::Eval { checkpoint, dataset, threshold, split, out, ledger, dump_affinity } => {
            commands::cmd_eval(
                &checkpoint,
                &dataset,
                threshold,
                &split,
                out.as_deref(),
                ledger.as_deref(),
                dump_affinity.as_deref(),
            )
        }
        Command::Soup { rule, checkpoints, dataset, out, ledger, label } => {
            commands::cmd_soup(&rule, &checkpoints, &dataset, &out, ledger.as_deref(), &label)
        }
        Command::Report { ledger, out } => commands::cmd_report(&ledger, &out),
        Command::LedgerVerify { ledger } => commands::cmd_ledger_verify(&ledger),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            if err.downcast_ref::<ValidationError>().is_some() {
                ExitCode::from(2)
            } else if matches!(
                err.downcast_ref::<seedprop_core::Error>(),
                Some(seedprop_core::Error::NumericalFailure { .. })
            ) {
                ExitCode::from(3)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
