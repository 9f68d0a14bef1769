use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: String,
        expected: usize,
        found: usize,
    },

    #[error("subsystem {subsystem}: iterate left the strict interior ({what} component {index} = {value})")]
    NotInterior {
        subsystem: usize,
        what: &'static str,
        index: usize,
        value: f64,
    },

    #[error("subsystem {subsystem}: non-finite entries in {what}")]
    NonFinite { subsystem: usize, what: &'static str },

    #[error("subsystem {subsystem}: local KKT matrix singular after regularization up to {max_regularization:e}")]
    SubsystemFailure { subsystem: usize, max_regularization: f64 },

    #[error("Schur matrix not positive definite along search direction (p'Sp = {curvature:e})")]
    NotPositiveDefinite { curvature: f64 },

    #[error("inconsistent multipliers on consensus row {row}: {first} vs {second}")]
    InconsistentMultipliers { row: usize, first: f64, second: f64 },

    #[error("topology violation: agent {from} attempted to message non-neighbor {to}")]
    TopologyViolation { from: usize, to: usize },

    #[error("reduction deadlock: agent {agent} did not contribute")]
    MissingContribution { agent: usize },

    #[error("reference solver did not converge ({status} after {iterations} iterations)")]
    OracleFailure { status: String, iterations: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid problem: {0}")]
    InvalidProblem(String),

    #[error("{source_name}:{line}: {message}")]
    Parse {
        source_name: String,
        line: usize,
        message: String,
    },

    #[error("{0}")]
    Usage(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
