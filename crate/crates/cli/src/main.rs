//! `qpc-screen`: simulation studies, ad-hoc screening, rolling forecasts and
//! runtime benchmarks for quantile partial correlation screening.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::Format;

#[derive(Parser, Debug)]
#[command(name = "qpc-screen", version, about = "Quantile partial correlation screening for time series")]
struct Cli {
    /// Worker threads (defaults to the number of available cores).
    #[arg(long, global = true, env = "QPC_SCREEN_JOBS")]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Replicated Monte Carlo study over a grid of (family, rho, phi, tau).
    Simulate(CommonArgs),
    /// Screen one dataset and write the selection trace.
    Screen(CommonArgs),
    /// Fixed-window rolling quantile forecasts on a macro panel.
    Forecast(CommonArgs),
    /// Average runtime per replication of each selection method.
    Bench(CommonArgs),
}

#[derive(Args, Debug, Clone)]
pub struct CommonArgs {
    /// TOML run configuration.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// Built-in base configuration (table1, table4, table7, table10); keys in
    /// --config override it.
    #[arg(long)]
    pub preset: Option<String>,

    /// Random seed (overrides the config's `seed`).
    #[arg(long, value_name = "U64")]
    pub seed: Option<u64>,

    /// Output file (a directory for `forecast`); standard output if absent.
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,

    /// Output format (overrides the config's `format`).
    #[arg(long, value_enum)]
    pub format: Option<Format>,
}

/// Failure classes with distinct exit codes.
#[derive(Debug)]
pub enum Failure {
    Config(anyhow::Error),
    Runtime(anyhow::Error),
}

pub trait Classify<T> {
    fn config(self) -> Result<T, Failure>;
    fn runtime(self) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn config(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Config(e.into()))
    }

    fn runtime(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Runtime(e.into()))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            eprintln!("error: --jobs must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(3);
        }
    }
    let result = match &cli.command {
        Command::Simulate(a) => commands::simulate(a),
        Command::Screen(a) => commands::screen(a),
        Command::Forecast(a) => commands::forecast(a),
        Command::Bench(a) => commands::bench(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("configuration error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(3)
        }
    }
}
