//! Error taxonomy shared by all solver modules.

use thiserror::Error;

/// Library-wide error type.
///
/// The variants map onto the CLI exit-code contract: `DimensionMismatch`,
/// `InvalidParameter` and `Precondition` are usage errors (exit 1), while
/// `Degenerate` signals a numerical breakdown (exit 3). Non-convergence is
/// never an error; solvers report it through result flags.
#[derive(Debug, Error)]
pub enum Error {
    /// Shapes of two inputs do not line up (structural error).
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// A scalar or configuration value is outside its admissible range.
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// A documented precondition on an operation was violated.
    #[error("precondition violated: {0}")]
    Precondition(String),

    /// Numerical degeneracy (non-finite values, vanishing densities).
    #[error("numerical degeneracy: {0}")]
    Degenerate(String),
}

pub type Result<T> = std::result::Result<T, Error>;
