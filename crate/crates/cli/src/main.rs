//! Command-line entry point binding data generation, training, scoring,
//! evaluation, ablations and memory benchmarking into reproducible runs.
//!
//! Every run resolves its configuration (file plus `--set` overrides plus
//! `--seed`), writes a manifest into the output directory first, then
//! produces its result files. Reruns with an identical manifest produce
//! bit-identical outputs.

mod commands;
mod runcfg;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use trip_core::alloc_track::TrackingAllocator;
use trip_core::Error;

// Peak-allocation tracking for the membench command.
#[global_allocator]
static ALLOC: TrackingAllocator = TrackingAllocator;

#[derive(Parser)]
#[command(name = "trip", version, about = "Tri-branch patch-wise time-series anomaly detection")]
struct Cli {
    #[command(subcommand)]
    command: CliCommand,

    /// Flat `section.key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<std::path::PathBuf>,

    /// Override one configuration key (repeatable), e.g. --set train.epochs=3
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,

    /// Output directory for the manifest and result files.
    #[arg(long, global = true, default_value = "out")]
    out: std::path::PathBuf,

    /// Run seed; overrides train.seed and synth.seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand, Clone, Copy)]
enum CliCommand {
    /// Generate a synthetic labeled series (values.csv, labels.csv).
    Synth,
    /// Train a model on a values CSV; writes model.ckpt and loss_history.csv.
    Train,
    /// Score a series with a trained checkpoint; writes scores.csv.
    Detect,
    /// Evaluate a score CSV against labels; writes report.txt and report.csv.
    Eval,
    /// Run the full model plus the eight single-change variants; writes ablation.csv.
    Ablate,
    /// Token/memory accounting grid; writes membench.csv.
    Membench,
}

impl CliCommand {
    fn name(self) -> &'static str {
        match self {
            CliCommand::Synth => "synth",
            CliCommand::Train => "train",
            CliCommand::Detect => "detect",
            CliCommand::Eval => "eval",
            CliCommand::Ablate => "ablate",
            CliCommand::Membench => "membench",
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            match err {
                Error::Config(_) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}

fn run(cli: &Cli) -> Result<(), Error> {
    let resolved = runcfg::resolve(cli.config.as_deref(), &cli.set, cli.seed)?;
    runcfg::validate_known_keys(&resolved)?;

    std::fs::create_dir_all(&cli.out)?;
    runcfg::write_manifest(&resolved, cli.command.name(), &cli.out)?;

    match cli.command {
        CliCommand::Synth => commands::synth(&resolved, &cli.out),
        CliCommand::Train => commands::train(&resolved, &cli.out),
        CliCommand::Detect => commands::detect(&resolved, &cli.out),
        CliCommand::Eval => commands::eval(&resolved, &cli.out),
        CliCommand::Ablate => commands::ablate(&resolved, &cli.out),
        CliCommand::Membench => commands::membench(&resolved, &cli.out),
    }
}
