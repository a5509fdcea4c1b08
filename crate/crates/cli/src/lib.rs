//! Command-line front end: argument parsing, run configuration and the
//! subcommands. [`run`] returns the process exit code.

pub mod commands;
pub mod config;

use std::ffi::OsString;

use clap::{Parser, Subcommand};
use thiserror::Error;

use commands::{
    BenchmarkArgs, BootstrapArgs, BucketsArgs, HeatmapArgs, IngestArgs, SynthArgs, TimelineArgs,
    TimeofdayArgs,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 2;
pub const EXIT_STRICT: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Output(String),
    #[error("strict mode: {0}")]
    Strict(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Strict(_) => EXIT_STRICT,
            _ => EXIT_INVALID,
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "dynbench",
    version,
    about = "Exposure-adjusted human crash-rate benchmarks"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Unadjusted and dynamic benchmarks with the correction multiplier
    Benchmark(BenchmarkArgs),
    /// Time-of-day multiplier from window shares and relative rates, or from raw crashes
    Timeofday(TimeofdayArgs),
    /// Rate-ordered quantile buckets
    Buckets(BucketsArgs),
    /// Multiplier at cumulative ADS mileage checkpoints
    Timeline(TimelineArgs),
    /// Per-cell exposure shares and rates as CSV
    Heatmap(HeatmapArgs),
    /// Bootstrap interval for one statistic
    Bootstrap(BootstrapArgs),
    /// Generate a synthetic county from a spec
    Synth(SynthArgs),
    /// Normalize crash files to the canonical CSV and export exposure
    Ingest(IngestArgs),
}

impl Command {
    fn threads(&self) -> Option<usize> {
        match self {
            Command::Benchmark(a) => a.common.threads,
            Command::Timeofday(a) => a.common.threads,
            Command::Buckets(a) => a.common.threads,
            Command::Timeline(a) => a.common.threads,
            Command::Heatmap(a) => a.common.threads,
            Command::Bootstrap(a) => a.common.threads,
            Command::Ingest(a) => a.common.threads,
            Command::Synth(_) => None,
        }
    }

    pub fn execute(&self) -> Result<(), CliError> {
        match self {
            Command::Benchmark(a) => commands::benchmark(a),
            Command::Timeofday(a) => commands::timeofday(a),
            Command::Buckets(a) => commands::buckets(a),
            Command::Timeline(a) => commands::timeline(a),
            Command::Heatmap(a) => commands::heatmap(a),
            Command::Bootstrap(a) => commands::bootstrap(a),
            Command::Synth(a) => commands::synth(a),
            Command::Ingest(a) => commands::ingest(a),
        }
    }
}

fn execute_with_threads(command: &Command) -> Result<(), CliError> {
    match command.threads() {
        Some(0) => Err(CliError::Input("--threads must be >= 1".into())),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| CliError::Input(e.to_string()))?
            .install(|| command.execute()),
        None => command.execute(),
    }
}

pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                EXIT_INVALID
            } else {
                EXIT_OK
            };
        }
    };
    match execute_with_threads(&cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
