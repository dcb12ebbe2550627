use thiserror::Error;

/// Errors raised anywhere in the estimation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("matrix is singular to working precision (condition estimate {cond:.3e})")]
    Singular { cond: f64 },

    #[error("filter is unstable: pole modulus {modulus} is not below 1")]
    Unstable { modulus: f64 },

    #[error("filter pair (A, b) is not reachable")]
    Unreachable,

    #[error("record too short: need at least {required} samples, got {got}")]
    InsufficientData { required: usize, got: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("covariance has full rank {0}; no decomposition with fewer atoms exists")]
    FullRank(usize),

    #[error("found {found} clusters below threshold, expected {wanted}")]
    Extraction { found: usize, wanted: usize },

    #[error("solver stopped with status {0:?}")]
    Solver(crate::conic::SdpStatus),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("eigenvalue iteration did not converge")]
    NoConvergence,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
