//! Long-run average-cost control of piecewise-deterministic Markov processes
//! on a discretized 1-D state space, by policy iteration on the embedded
//! jump chain, with Monte Carlo validation of the resulting policies.

pub mod audit;
pub mod error;
pub mod evaluation;
pub mod fixtures;
pub mod flow;
pub mod model;
pub mod operators;
pub mod pia;
pub mod policy;
pub mod simulate;

pub use error::{EvalError, FlowError, ModelError, PolicyError, SimError};
pub use flow::{Flow, FlowKind, FlowMesh, FlowSpec, MeshSpec};
pub use model::{load_model, parse_model, validate_model, PdmpModel, Violation};
pub use operators::{Engine, KernelMatrix, PolicyPath, PolicyTerms};
pub use policy::FeedbackPolicy;
