//! `subtype`: latent-class trajectory subtyping pipeline.
//!
//! Exit codes: 0 success, 2 usage, 3 data validation, 4 numerical failure.
//! Failures print one JSON line on stderr and still write the manifest.

mod commands;
mod error;
mod files;
mod manifest;
mod report;

use clap::{Parser, Subcommand};
use serde::Serialize;

use commands::{CharacterizeArgs, Common, FitArgs, ReportArgs, SelectArgs, SimulateArgs, SurvivalArgs, ValidateArgs};
use error::CliError;
use manifest::Run;

#[derive(Parser, Debug)]
#[command(
    name = "subtype",
    version,
    about = "Latent-class mixed models for longitudinal trajectory subtyping"
)]
#[command(arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic cohort with known classes.
    Simulate(SimulateArgs),
    /// Fit a latent-class mixed model with a fixed number of classes.
    Fit(FitArgs),
    /// Fit a range of class counts and select by minimum ICL.
    Select(SelectArgs),
    /// Membership stability under subsampling or visit truncation.
    Validate(ValidateArgs),
    /// Compare baseline variables across clusters.
    Characterize(CharacterizeArgs),
    /// Kaplan-Meier conversion curves per cluster.
    Survival(SurvivalArgs),
    /// Summary text and plot data for a run directory.
    Report(ReportArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Simulate(_) => "simulate",
            Command::Fit(_) => "fit",
            Command::Select(_) => "select",
            Command::Validate(_) => "validate",
            Command::Characterize(_) => "characterize",
            Command::Survival(_) => "survival",
            Command::Report(_) => "report",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::Simulate(a) => &a.common,
            Command::Fit(a) => &a.common,
            Command::Select(a) => &a.common,
            Command::Validate(a) => &a.common,
            Command::Characterize(a) => &a.common,
            Command::Survival(a) => &a.common,
            Command::Report(a) => &a.common,
        }
    }

    fn config(&self) -> serde_json::Value {
        fn value<T: Serialize>(t: &T) -> serde_json::Value {
            serde_json::to_value(t).expect("arguments serialise")
        }
        match self {
            Command::Simulate(a) => value(a),
            Command::Fit(a) => value(a),
            Command::Select(a) => value(a),
            Command::Validate(a) => value(a),
            Command::Characterize(a) => value(a),
            Command::Survival(a) => value(a),
            Command::Report(a) => value(a),
        }
    }

    fn execute(&self, run: &mut Run) -> Result<(), CliError> {
        match self {
            Command::Simulate(a) => commands::simulate(a, run),
            Command::Fit(a) => commands::fit_cmd(a, run),
            Command::Select(a) => commands::select(a, run),
            Command::Validate(a) => commands::validate(a, run),
            Command::Characterize(a) => commands::characterize_cmd(a, run),
            Command::Survival(a) => commands::survival(a, run),
            Command::Report(a) => commands::report(a, run),
        }
    }
}

fn configure_threads(threads: Option<usize>) -> Result<usize, CliError> {
    if let Some(n) = threads {
        if n == 0 {
            return Err(CliError::usage("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::usage(format!("cannot configure thread pool: {e}")))?;
    }
    Ok(rayon::current_num_threads())
}

fn main() {
    let cli = Cli::parse();
    let common = cli.command.common().clone();
    let threads = configure_threads(common.threads);
    let mut run = Run::new(
        cli.command.name(),
        cli.command.config(),
        common.seed,
        *threads.as_ref().unwrap_or(&0),
        &common.out,
    );
    let outcome = threads.and_then(|_| cli.command.execute(&mut run));
    let written = run.finish(&outcome);
    let outcome = outcome.and(written.map(|_| ()));
    if let Err(e) = outcome {
        eprintln!("{}", e.to_json_line());
        std::process::exit(e.exit_code());
    }
}
