use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid dimension: {0}")]
    InvalidDimension(String),

    #[error("value outside domain: {0}")]
    Domain(String),

    #[error("degenerate spectrum: {0}")]
    DegenerateSpectrum(String),

    #[error("ill-conditioned system: {0}")]
    IllConditioned(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    /// Every optimization run produced a non-finite objective. `best` holds the
    /// best finite packed hyperparameter vector seen, if any.
    #[error("optimization failed: {reason}")]
    OptimizationFailure { reason: String, best: Option<Vec<f64>> },

    #[error("parse error at row {row}, column {column}: {message}")]
    Parse { row: usize, column: usize, message: String },

    #[error("empty input")]
    EmptyInput,

    #[error("instance too large for reference implementation: {0}")]
    SizeGuard(String),

    #[error("malformed model file: {0}")]
    ModelFormat(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
