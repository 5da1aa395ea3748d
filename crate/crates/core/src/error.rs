use thiserror::Error;

/// Errors raised by the geometric and algebraic routines.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invariant violated: {0}")]
    InvariantViolation(String),

    /// A matrix that has to be invertible is (numerically) singular.
    #[error("degenerate geometry: {0}")]
    Degenerate(String),

    /// The measured data is not consistent with a rigid placement.
    #[error("inconsistent data: {0}")]
    Inconsistent(String),

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("input too large: {0}")]
    TooLarge(String),
}

pub type Result<T> = std::result::Result<T, Error>;
