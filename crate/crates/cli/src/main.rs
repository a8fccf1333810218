//! `vandisc`: run vanishing-discount experiments and write reproducible artifacts.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

#[derive(Debug, Parser, Serialize)]
#[command(name = "vandisc", version, about = "Discounted BSDE control problems and their vanishing-discount limits")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Serialize)]
pub struct Common {
    /// `builtin:<name>` or a path to a problem config.
    #[arg(long, global = true)]
    pub problem: Option<String>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Worker threads.
    #[arg(long, global = true, env = "VANDISC_THREADS")]
    pub threads: Option<usize>,
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Solve the discounted HJB equation on a grid.
    SolveHjb(commands::SolveHjbArgs),
    /// Solve a decreasing list of discounts and diagnose the limit.
    SweepLambda(commands::SweepArgs),
    /// Discounted cost BSDE along a constant control.
    Bsde(commands::BsdeArgs),
    /// Nonexpansivity, radial monotonicity and the stochastic nonexpansivity probe.
    CheckConditions(commands::ConditionsArgs),
    /// The g-expectation representation of the limit.
    Represent(commands::RepresentArgs),
    /// Dynamic programming residual of a solved field.
    DppCheck(commands::DppArgs),
    /// Lipschitz audit of the declared constants and domain invariance.
    Audit(commands::AuditArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::SolveHjb(_) => "solve-hjb",
            Command::SweepLambda(_) => "sweep-lambda",
            Command::Bsde(_) => "bsde",
            Command::CheckConditions(_) => "check-conditions",
            Command::Represent(_) => "represent",
            Command::DppCheck(_) => "dpp-check",
            Command::Audit(_) => "audit",
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
