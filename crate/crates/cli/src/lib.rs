//! Command-line front end: CSV ingestion, configuration parsing and the
//! `estimate`, `simulate`, `design` and `test-exchangeability` subcommands.

pub mod commands;
pub mod config;
pub mod data;
pub mod error;
pub mod render;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub use crate::error::CliError;

#[derive(Parser, Debug)]
#[command(name = "spillover", version, about = "Direct and spillover effects in group-randomized experiments")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct GlobalArgs {
    /// Master seed for simulation and bootstrap draws.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// How peer treatment is summarised.
    #[arg(long, global = true, value_parser = ["exchangeable", "saturated", "reference"])]
    pub mode: Option<String>,
    /// Handling of unequal group sizes.
    #[arg(long, global = true, value_parser = ["separate", "size-fe", "proportion"])]
    pub policy: Option<String>,
    /// Wild-bootstrap replications (omit for normal intervals only).
    #[arg(long, global = true, value_name = "B")]
    pub bootstrap: Option<usize>,
    /// Directory for JSON and CSV outputs.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Format of the report printed to stdout.
    #[arg(long, global = true, value_enum, default_value_t = Format::Text)]
    pub format: Format,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Text,
    Json,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Estimate direct and spillover effects from a CSV dataset.
    Estimate(commands::estimate::EstimateArgs),
    /// Run a Monte Carlo study from a config file or bundled preset.
    Simulate(commands::simulate::SimulateArgs),
    /// Compare randomization designs for a group size and number of groups.
    Design(commands::design::DesignArgs),
    /// Test exchangeability of neighbors using ranked neighbors.
    TestExchangeability(commands::exchangeability::ExchangeabilityArgs),
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var("SPILLOVER_THREADS") else {
        return Ok(());
    };
    let threads: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&t| t > 0)
        .ok_or_else(|| CliError::Usage(format!("SPILLOVER_THREADS must be a positive integer, got '{raw}'")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| CliError::Usage(format!("cannot configure worker threads: {e}")))
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    configure_threads()?;
    let output = match cli.command {
        Command::Estimate(args) => commands::estimate::run(&cli.global, &args)?,
        Command::Simulate(args) => commands::simulate::run(&cli.global, &args)?,
        Command::Design(args) => commands::design::run(&cli.global, &args)?,
        Command::TestExchangeability(args) => commands::exchangeability::run(&cli.global, &args)?,
    };
    output.emit(&cli.global)
}

/// Parse the process arguments, run, and map the outcome to an exit code.
pub fn main_entry() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
