//! Error type shared across the crate.

use thiserror::Error;

/// Errors surfaced by panel construction, projections, the solver, and I/O.
#[derive(Debug, Error)]
pub enum Error {
    /// Entities disagree on dimensions, or an input has the wrong shape.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// A series has fewer than two time points.
    #[error("series too short: {0}")]
    TooShort(String),

    /// NaN or infinity encountered in input data.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// An operation received an empty input.
    #[error("empty input: {0}")]
    EmptyInput(String),

    /// Singular values handed to the simplex projection must be sorted
    /// nonincreasing and nonnegative.
    #[error("input not sorted nonincreasing and nonnegative")]
    UnsortedInput,

    /// The SVD backend failed to converge.
    #[error("svd failed")]
    SvdFailure,

    /// A row required to be nonzero has zero norm.
    #[error("zero row at index {0}")]
    ZeroRow(usize),

    /// A linear system that should be positive definite could not be solved;
    /// signals NaN contamination.
    #[error("linear solve failed: {0}")]
    SolveFailure(String),

    /// The augmented objective increased beyond tolerance; the step size is
    /// too small for this data.
    #[error(
        "objective increased at iteration {iteration} ({previous} -> {current}); \
         step size {step_size} is too small"
    )]
    NonDescent {
        iteration: usize,
        previous: f64,
        current: f64,
        step_size: f64,
    },

    /// The data generator could not produce a stable transition matrix.
    #[error("no stable transition matrix for entity {entity} after {attempts} draws")]
    UnstableDraw { entity: usize, attempts: usize },

    /// Invalid configuration value.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// Malformed input file.
    #[error("parse error: {0}")]
    Parse(String),

    /// Underlying I/O failure.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// JSON (de)serialization failure.
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
