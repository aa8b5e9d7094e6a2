use thiserror::Error;

use crate::model::Violation;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("cannot read model file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at line {line}, column {column} (field `{field}`): {message}")]
    Parse {
        field: String,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("field `{field}`: {message}")]
    Field { field: String, message: String },
    #[error("dimension mismatch in table `{table}`: expected {expected} entries, found {found}")]
    Dimension {
        table: String,
        expected: usize,
        found: usize,
    },
    #[error("model violates {} invariant(s); first: {}", .0.len(), .0[0])]
    Invalid(Vec<Violation>),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FlowError {
    #[error("cannot advance {time} time units from {state}: boundary is reached at t* = {hit_time}")]
    PastBoundary {
        state: f64,
        time: f64,
        hit_time: f64,
    },
    #[error("negative flow time {0}")]
    NegativeTime(f64),
    #[error("flow line from {state} leaves the grid without reaching a boundary point")]
    Escapes { state: f64 },
    #[error("flow specification: {0}")]
    Spec(String),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PolicyError {
    #[error("policy has {found} {what} entries, model has {expected}")]
    Length {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("action {action} is not feasible at state {state}")]
    Infeasible { state: usize, action: usize },
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error("embedded chain has {classes} closed communicating classes; the invariant measure is not unique")]
    MultipleRecurrentClasses { classes: usize },
    #[error("invariant measure did not converge after {iterations} iterations (estimated subdominant modulus {subdominant:.6})")]
    NoConvergence { iterations: usize, subdominant: f64 },
    #[error("deflated Poisson system is numerically singular (geometric rate close to 1)")]
    Singular,
    #[error("Neumann series refused: {0}")]
    SeriesRefused(String),
    #[error("pseudo-Poisson residual {residual:.3e} exceeds tolerance {tol:.3e}")]
    Residual { residual: f64, tol: f64 },
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error("horizon must be positive, got {0}")]
    Horizon(f64),
    #[error("state {state} never jumps: flow never reaches the boundary and the tail jump rate vanishes")]
    NoJump { state: f64 },
    #[error("jump-explosion guard: {jumps} jumps by t = {time:.6} (rate {rate:.3e} per time unit)")]
    Explosion { jumps: u64, time: f64, rate: f64 },
}
