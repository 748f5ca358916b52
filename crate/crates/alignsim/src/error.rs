//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by corpus construction, training, aggregation, and the
/// verification suites.
#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value violates its documented bounds.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Tensor or vector shapes do not line up.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A constrained optimization problem has no feasible point
    /// (e.g. an event of probability mass 0 or 1 cannot be tilted).
    #[error("infeasible constraint: {0}")]
    InfeasibleConstraint(String),

    /// An input value is outside its mathematical domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// Training produced a non-finite loss; aborted with context.
    #[error("non-finite loss: {0}")]
    NonFinite(String),

    /// An aggregation rule rejected every submitted update.
    #[error("no quorum: {0}")]
    NoQuorum(String),

    /// A probe was asked to train on fewer than two classes.
    #[error("single-class input: {0}")]
    SingleClass(String),

    /// Probe class sizes are too lopsided to train on.
    #[error("class imbalance: {0}")]
    ClassImbalance(String),

    /// A serialized artifact failed to parse.
    #[error("parse error: {0}")]
    Parse(String),

    #[error("unknown scenario: {0}")]
    UnknownScenario(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
