//! `nofis` command-line front end: single-method runs, multi-method
//! comparisons and heatmap export.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use nofis_core::harness::HeatmapGrid;

use crate::commands::VisualizeArgs;
use crate::config::{Overrides, OUT_DIR_ENV};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{0}")]
    Runtime(#[from] nofis_core::Error),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 1,
            CliError::Runtime(nofis_core::Error::Io { .. }) | CliError::Io { .. } => 3,
            CliError::Runtime(_) => 2,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "nofis", version, about = "Rare-event probability estimation with flow-based importance sampling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, clap::Args)]
struct RunFlags {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Base seed; trial i uses seed + i.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (default: config out_dir, then $NOFIS_OUT_DIR, then ./nofis-out).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    repeats: Option<usize>,
    /// Method name, or a comma-separated list for compare.
    #[arg(long)]
    method: Option<String>,
}

impl RunFlags {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            out: self.out.clone(),
            repeats: self.repeats,
            method: self.method.clone(),
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run repeated trials of one method and write report.json.
    Run(RunFlags),
    /// Run several methods on one problem and write compare.csv and compare.json.
    Compare(RunFlags),
    /// Write an x,y,density table for a 2-D flow checkpoint or an optimal proposal.
    Visualize {
        /// Flow checkpoint to evaluate.
        #[arg(long, conflicts_with = "optimal", required_unless_present = "optimal")]
        checkpoint: Option<PathBuf>,
        /// Catalog problem whose zero-variance proposal is tabulated.
        #[arg(long)]
        optimal: Option<String>,
        #[arg(long, default_value_t = -6.0, allow_hyphen_values = true)]
        xmin: f64,
        #[arg(long, default_value_t = 6.0, allow_hyphen_values = true)]
        xmax: f64,
        #[arg(long, default_value_t = -6.0, allow_hyphen_values = true)]
        ymin: f64,
        #[arg(long, default_value_t = 6.0, allow_hyphen_values = true)]
        ymax: f64,
        /// Cells per axis (at least 50).
        #[arg(long, default_value_t = 200)]
        steps: usize,
        /// CSV path (default: heatmap.csv in the output directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(flags) => commands::run(&flags.config, &flags.overrides()),
        Command::Compare(flags) => commands::compare(&flags.config, &flags.overrides()),
        Command::Visualize {
            checkpoint,
            optimal,
            xmin,
            xmax,
            ymin,
            ymax,
            steps,
            out,
        } => {
            let out = out.unwrap_or_else(|| {
                std::env::var_os(OUT_DIR_ENV)
                    .map(PathBuf::from)
                    .unwrap_or_else(|| PathBuf::from("nofis-out"))
                    .join("heatmap.csv")
            });
            commands::visualize(&VisualizeArgs {
                checkpoint,
                optimal,
                grid: HeatmapGrid {
                    xmin,
                    xmax,
                    ymin,
                    ymax,
                    steps,
                },
                out,
            })
        }
    };
    match result {
        Ok(outcome) if outcome.clean => ExitCode::SUCCESS,
        Ok(_) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
