//! `soc-lab`: checks, training, simulation and reports from one JSON config.

mod checks;
mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use soc_lab::parallel::with_workers;

use crate::config::ExperimentConfig;

#[derive(Debug)]
pub enum CliError {
    /// Invalid config; exit code 2.
    Config(String),
    /// A failed check, aborted training or I/O error; exit code 1.
    Failure(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Failure(m) => write!(f, "{m}"),
        }
    }
}

#[derive(Parser)]
#[command(name = "soc-lab", version, about = "Stochastic optimal control by adjoint matching")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the selected invariant checks, one CSV each.
    Check(Common),
    /// Train the configured control; writes history.csv, checkpoint.json and metrics.json.
    Train(Common),
    /// Simulate paths and their adjoints; writes trajectories.csv and adjoints.csv.
    Simulate(Common),
    /// Evaluate the configured control; writes report.json (and riccati.csv for LQ).
    Report(Common),
}

#[derive(Args)]
struct Common {
    /// JSON experiment config; the built-in scalar LQ config when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `master_seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long)]
    workers: Option<usize>,
    /// Overrides `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn workers(requested: Option<usize>) -> usize {
    if std::env::var("SOC_LAB_DETERMINISTIC").is_ok_and(|v| v == "1") {
        1
    } else {
        requested.unwrap_or(0)
    }
}

type Body = fn(&ExperimentConfig, &std::path::Path) -> Result<(), CliError>;

fn run(cli: Cli) -> Result<(), CliError> {
    let (common, body): (&Common, Body) = match &cli.command {
        Command::Check(c) => (c, commands::check),
        Command::Train(c) => (c, commands::train),
        Command::Simulate(c) => (c, commands::simulate),
        Command::Report(c) => (c, commands::report),
    };
    let cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default_lq(),
    }
    .with_seed(common.seed);
    let out = common.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
    with_workers(workers(common.workers), || body(&cfg, &out))
        .map_err(|e| CliError::Failure(e.to_string()))?
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("soc-lab: {e}");
            ExitCode::from(match e {
                CliError::Config(_) => 2,
                CliError::Failure(_) => 1,
            })
        }
    }
}
