use thiserror::Error;

/// Errors raised by basis construction, model assembly, fitting and the
/// simulation harness.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid basis: {0}")]
    InvalidBasis(String),

    #[error("point {point} outside domain [{lo}, {hi}]")]
    OutOfDomain { point: f64, lo: f64, hi: f64 },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("degenerate response: {0}")]
    DegenerateResponse(String),

    #[error("unknown subject `{0}`")]
    UnknownSubject(String),

    #[error("unknown covariate `{0}`")]
    UnknownCovariate(String),

    #[error("numerical failure: {0}")]
    Numerical(String),
}

pub type Result<T> = std::result::Result<T, Error>;
