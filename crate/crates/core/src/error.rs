//! Error type shared by all solver modules.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    /// A model or discretization parameter violates its admissibility condition.
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// The plain fourth-order elliptic operator is singular at the named mode.
    #[error("elliptic operator is not invertible: drift eigenvalue vanishes at mode k={mode}")]
    SingularOperator { mode: usize },

    /// A point lies outside the domain or time horizon.
    #[error("argument out of range: {0}")]
    OutOfRange(String),

    /// Time-stepping stability/invertibility gate failed.
    #[error("stability gate violated: {0}")]
    GateViolation(String),

    /// A linear solve that is guaranteed well-posed failed anyway.
    #[error("internal solver failure: {0}")]
    Internal(String),

    /// A computation would exceed the configured memory budget.
    #[error("memory guard tripped: {0}")]
    MemoryGuard(String),

    /// Mismatched discretizations or vector lengths.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// Malformed input data (CSV import, config files).
    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, CoreError>;
