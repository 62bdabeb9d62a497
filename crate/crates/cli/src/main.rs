//! Command-line front end: dataset generation, surrogate training, KKT
//! solves, envelope tolerance sweeps, and robust-radius studies. Every
//! command writes a manifest recording inputs (hashed), outputs, the
//! resolved configuration, and wall time, so runs can be reproduced.

mod commands;
mod manifest;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use bilevel_core::Error as CoreError;

#[derive(Parser)]
#[command(
    name = "bilevel",
    version,
    about = "Train shallow surrogates, embed them in bi-level problems, and solve the KKT reformulations"
)]
struct Cli {
    /// Cap for the internal worker-thread pool.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// JSON config file; command-line flags take precedence over it.
    #[arg(long, global = true)]
    config: Option<std::path::PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a benchmark or synthetic-plant dataset as CSV.
    GenData(commands::gendata::GenDataArgs),
    /// Train a surrogate on a CSV column and save the model JSON.
    Train(commands::train::TrainArgs),
    /// Solve a problem's KKT reformulation (analytic or surrogate objectives).
    Solve(commands::solve::SolveArgs),
    /// Sweep the validity-envelope percentile on a plant problem.
    SweepTau(commands::sweep::SweepArgs),
    /// Stability-radius robust optimization over efficiency floors.
    Robust(commands::robust::RobustArgs),
    /// Pretty-print a saved report, sweep, or robust-solution JSON.
    Report(commands::report::ReportArgs),
}

/// Exit codes: 0 ok, 1 usage/schema, 2 numerical failure, 3 only-infeasible
/// results.
fn exit_code_for(err: &CoreError) -> u8 {
    match err {
        CoreError::Schema(_)
        | CoreError::InvalidInput(_)
        | CoreError::Parse(_)
        | CoreError::DimensionMismatch { .. }
        | CoreError::Io(_)
        | CoreError::Csv(_)
        | CoreError::Json(_) => 1,
        CoreError::Numerical(_) => 2,
        CoreError::Infeasible(_) => 3,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help/version are not errors
            use clap::error::ErrorKind::*;
            let _ = e.print();
            return match e.kind() {
                DisplayHelp | DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };

    if let Some(t) = cli.threads {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(t).build_global();
    }
    let file_config = match commands::FileConfig::load(cli.config.as_deref()) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };

    let result = match cli.command {
        Command::GenData(args) => commands::gendata::run(args, &file_config),
        Command::Train(args) => commands::train::run(args, &file_config),
        Command::Solve(args) => commands::solve::run(args, &file_config),
        Command::SweepTau(args) => commands::sweep::run(args, &file_config),
        Command::Robust(args) => commands::robust::run(args, &file_config),
        Command::Report(args) => commands::report::run(args),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
