//! `sparsemep`: exact-k sparse regression by deterministic annealing.

mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::CliError;

const EXIT_CODES: &str = "\
Exit status:
  0   success
  1   usage or configuration error (including k = 0 or k > d)
  2   data integrity error (unreadable, malformed or incomplete input)
  3   infeasible constraint set
  4   solver failure (singular or non-finite numerics)
  16  success with warnings (bit 4 set): a non-converged inner loop, soft
      rounding, repaired rounding, a failed projection or a violated
      constraint; see the summary on stdout";

#[derive(Parser, Debug)]
#[command(name = "sparsemep", version, about, after_help = EXIT_CODES)]
struct Cli {
    /// Repeat for more log output (info, debug, per-temperature trace).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Turn the raw automobile CSV (or a seeded synthetic instance) into a problem document.
    Prep(PrepArgs),
    /// Anneal one problem and write the rounded solution.
    Fit(RunArgs),
    /// Anneal with the full trace and analyse its phase transitions.
    Trace(TraceArgs),
    /// Tabulate annealing against OMP and exhaustive search.
    Compare(CompareArgs),
}

#[derive(Args, Debug)]
struct PrepArgs {
    /// UCI automobile file (`imports-85.data`).
    #[arg(required_unless_present = "synthetic")]
    raw: Option<PathBuf>,
    /// JSON feature mapping overriding the built-in a1..a13 assignment.
    #[arg(long)]
    mapping: Option<PathBuf>,
    /// Sparsity budget stored in the problem.
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    k: Option<u32>,
    /// Generate a planted-sparsity instance instead of reading a file.
    #[arg(long, conflicts_with_all = ["raw", "mapping"])]
    synthetic: bool,
    #[arg(long, default_value_t = 0, requires = "synthetic")]
    seed: u64,
    #[arg(long, requires = "synthetic")]
    noise: Option<f64>,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

#[derive(Args, Debug, Clone)]
struct SolveArgs {
    /// Problem document written by `prep`.
    problem: PathBuf,
    /// Sparsity budget; defaults to the one stored in the problem.
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    k: Option<u32>,
    /// JSON list of constraints, e.g. `[{"kind": "at_most_one", "features": [1, 2]}]`.
    #[arg(long)]
    constraints: Option<PathBuf>,
    /// JSON annealing configuration; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Geometric cooling factor.
    #[arg(long)]
    beta: Option<f64>,
    /// Lowest temperature.
    #[arg(long)]
    tmin: Option<f64>,
    /// Starting temperature: `auto` or a number.
    #[arg(long)]
    tmax: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

#[derive(Args, Debug)]
struct RunArgs {
    #[command(flatten)]
    solve: SolveArgs,
}

#[derive(Args, Debug)]
struct TraceArgs {
    #[command(flatten)]
    solve: SolveArgs,
    /// Skip the reduced-Hessian critical temperatures.
    #[arg(long)]
    no_analytic: bool,
}

#[derive(Args, Debug)]
struct CompareArgs {
    problem: PathBuf,
    /// Budgets to compare; repeat or separate with commas.
    #[arg(long, value_delimiter = ',', value_parser = clap::value_parser!(u32).range(1..))]
    k: Vec<u32>,
    #[arg(long)]
    constraints: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    tmin: Option<f64>,
    #[arg(long)]
    tmax: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(commands::EXIT_USAGE),
            };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        2 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();

    let result = match cli.command {
        Command::Prep(a) => commands::prep(a),
        Command::Fit(a) => commands::fit(a.solve),
        Command::Trace(a) => commands::trace(a.solve, !a.no_analytic),
        Command::Compare(a) => commands::compare(a),
    };
    match result {
        Ok(warned) => ExitCode::from(if warned { commands::WARNING_BIT } else { 0 }),
        Err(CliError { code, error }) => {
            eprintln!("error: {error:#}");
            ExitCode::from(code)
        }
    }
}
