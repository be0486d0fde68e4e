//! Simulate, fit, summarize and diagnose spatial illness-death models from
//! a TOML configuration.

pub mod cohort;
pub mod commands;
pub mod config;
pub mod draws;
pub mod error;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::commands::Context;
use crate::config::RunConfig;
pub use crate::error::{CliError, Exit};

#[derive(Debug, Parser)]
#[command(
    name = "illdeath",
    version,
    about = "Bayesian spatial illness-death models"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory; overrides `paths.output`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    pub force: bool,
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, Subcommand)]
pub enum Command {
    /// Simulate a cohort: cohort.csv, truth.json, adjacency.txt.
    Simulate,
    /// Sample the posterior: draws.csv, summary.json, diagnostics.json.
    Fit,
    /// Posterior outcome curves from fitted draws: outcomes.csv.
    Outcomes,
    /// Print convergence diagnostics of fitted draws.
    Diagnose,
}

/// Runs a parsed command line and returns the exit status.
pub fn run(cli: Cli) -> Result<Exit, CliError> {
    let path = cli
        .config
        .ok_or_else(|| CliError::config("--config PATH is required"))?;
    let mut config = RunConfig::load(&path)?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    let ctx = Context::new(config, cli.out, cli.force)?;
    let job = || match cli.command {
        Command::Simulate => commands::simulate(&ctx),
        Command::Fit => commands::fit(&ctx),
        Command::Outcomes => commands::outcomes(&ctx),
        Command::Diagnose => commands::diagnose(&ctx, &mut std::io::stdout().lock()),
    };
    match cli.threads {
        Some(0) => Err(CliError::config("--threads must be at least 1")),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| CliError::config(e.to_string()))?
            .install(job),
        None => job(),
    }
}
