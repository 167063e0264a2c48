//! Command-line driver for `signflow-core`: configuration, batch
//! orchestration over a worker pool, and the CSV/JSON artifacts.

pub mod commands;
pub mod config;
pub mod error;
pub mod format;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::commands::FigureKind;
use crate::config::{CommonArgs, RunConfig};
pub use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "signflow", version, about = "Smoothed sign descent flows: simulate, verify, sweep")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Integrate one run and write trajectory, stage, KKT and verification files
    Simulate {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Check every claim on a seeded batch of admissible instances
    Verify {
        #[command(flatten)]
        common: CommonArgs,
        /// Number of instances (default 200)
        #[arg(long, value_name = "N")]
        instances: Option<u64>,
        /// Largest number of blocks per instance (default 3)
        #[arg(long, value_name = "N")]
        max_blocks: Option<usize>,
    },
    /// Run one simulation per ε and write the summary table
    Sweep {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Write figure-ready CSVs
    Figure {
        #[arg(value_enum)]
        which: FigureKind,
        /// Read sweep outputs from this directory instead of running a sweep
        #[arg(long, value_name = "DIR")]
        from: Option<PathBuf>,
        #[command(flatten)]
        common: CommonArgs,
    },
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Simulate { common } => commands::simulate(&RunConfig::resolve(common)?),
        Command::Verify { common, instances, max_blocks } => {
            let mut cfg = RunConfig::resolve(common)?;
            cfg.instances = instances.or(cfg.instances);
            cfg.max_blocks = max_blocks.or(cfg.max_blocks);
            commands::verify(&cfg)
        }
        Command::Sweep { common } => commands::sweep(&RunConfig::resolve(common)?),
        Command::Figure { which, from, common } => commands::figure(*which, from.as_deref(), &RunConfig::resolve(common)?),
    }
}
