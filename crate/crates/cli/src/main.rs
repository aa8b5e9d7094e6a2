//! `pdmp-avgctl`: validate, audit, solve and simulate average-cost PDMP models.

mod artifacts;
mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Exit statuses. Clap's own usage errors also exit with 2.
pub mod exit {
    pub const OK: u8 = 0;
    pub const VALIDATION: u8 = 1;
    pub const USAGE: u8 = 2;
    pub const NOT_CONVERGED: u8 = 3;
    pub const STRICT_AUDIT: u8 = 4;
    pub const SIM_ABORT: u8 = 5;
}

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn new(code: u8, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }

    pub fn io(message: impl Into<String>) -> Self {
        Self::new(exit::USAGE, message)
    }

    pub fn usage(message: impl Into<String>) -> Self {
        Self::new(exit::USAGE, message)
    }
}

#[derive(Parser, Debug)]
#[command(name = "pdmp-avgctl", version, about = "Average-cost policy iteration for controlled PDMPs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    config: RunConfig,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    /// Check a model file against its structural invariants.
    Validate,
    /// Check the standing assumptions numerically (optionally for a policy).
    Audit,
    /// Evaluate one policy: ρ, h and the invariant measure.
    Evaluate,
    /// Run policy iteration to an optimal feedback policy.
    Solve,
    /// Simulate a policy and estimate its long-run average cost.
    Simulate,
    /// Solve and emit plot-ready convergence tables.
    Report,
}

#[derive(Args, Debug, Clone)]
pub struct RunConfig {
    /// Model file (JSON).
    #[arg(long, global = true)]
    pub model: Option<PathBuf>,
    /// Stop policy iteration once ρ improves by less than this.
    #[arg(long, global = true, default_value_t = 1e-8)]
    pub tol_rho: f64,
    /// Pseudo-Poisson residual tolerance for each evaluation.
    #[arg(long, global = true, default_value_t = 1e-8)]
    pub tol: f64,
    #[arg(long, global = true, default_value_t = 200)]
    pub max_iter: usize,
    /// Simulated time per replication.
    #[arg(long, global = true, default_value_t = 1e4)]
    pub horizon: f64,
    /// Independent replications.
    #[arg(long, global = true, default_value_t = 32)]
    pub reps: u64,
    /// Simulation seed (required by `simulate`).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Initial state of simulated paths (default: the first grid point).
    #[arg(long, global = true, allow_hyphen_values = true)]
    pub x0: Option<f64>,
    /// Policy file (`policy.json` from `solve`, or a bare selector).
    #[arg(long, global = true)]
    pub policy: Option<PathBuf>,
    /// Reference average cost for the Monte Carlo check.
    #[arg(long, global = true, allow_hyphen_values = true)]
    pub rho: Option<f64>,
    /// Also write the first replication's event log as CSV.
    #[arg(long, global = true)]
    pub trajectory: bool,
    /// Fail (exit 4) when an assumption check fails instead of warning.
    #[arg(long, global = true)]
    pub strict_audit: bool,
    /// Omit timing and thread fields so reruns give byte-identical artifacts.
    #[arg(long, global = true)]
    pub deterministic: bool,
    /// Output directory for artifacts.
    #[arg(long, global = true, default_value = ".")]
    pub out: PathBuf,
    /// Cap on worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

impl RunConfig {
    fn check(&self, command: Command) -> Result<(), CliError> {
        if self.model.is_none() {
            return Err(CliError::usage("--model is required"));
        }
        for (name, v) in [("--tol-rho", self.tol_rho), ("--tol", self.tol)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(CliError::usage(format!("{name} must be positive, got {v}")));
            }
        }
        if self.max_iter == 0 {
            return Err(CliError::usage("--max-iter must be at least 1"));
        }
        if command == Command::Simulate {
            if !(self.horizon > 0.0 && self.horizon.is_finite()) {
                return Err(CliError::usage(format!("--horizon must be positive, got {}", self.horizon)));
            }
            if self.reps == 0 {
                return Err(CliError::usage("--reps must be at least 1"));
            }
            if self.seed.is_none() {
                return Err(CliError::usage("simulate requires --seed"));
            }
        }
        if self.threads == Some(0) {
            return Err(CliError::usage("--threads must be at least 1"));
        }
        Ok(())
    }
}

fn run(cli: Cli) -> Result<u8, CliError> {
    let cfg = cli.config;
    cfg.check(cli.command)?;
    if let Some(n) = cfg.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::usage(format!("--threads: {e}")))?;
    }
    match cli.command {
        Command::Validate => commands::validate(&cfg),
        Command::Audit => commands::audit(&cfg),
        Command::Evaluate => commands::evaluate(&cfg),
        Command::Solve => commands::solve(&cfg),
        Command::Simulate => commands::simulate(&cfg),
        Command::Report => commands::report(&cfg),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
