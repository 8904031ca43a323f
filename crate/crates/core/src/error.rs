use thiserror::Error;

/// Errors raised across the sampler, fitting and experiment layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("matrix is not positive definite (pivot {pivot})")]
    NotPositiveDefinite { pivot: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("mixture component {component} collapsed to {mass:.3} effective points")]
    DegenerateComponent { component: usize, mass: f64 },

    #[error("every candidate model failed to fit: {0}")]
    AllCandidatesFailed(String),

    #[error("at least {needed} samples are required, got {got}")]
    InsufficientSamples { needed: usize, got: usize },

    #[error("reference vector has zero norm")]
    ZeroReference,

    #[error("image error: {0}")]
    ImageIo(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Process exit code used by the command-line front-end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidArgument(_) => 2,
            Error::Io(_) | Error::ImageIo(_) | Error::Csv(_) => 4,
            Error::Json(e) if e.is_io() => 4,
            Error::Json(_) => 2,
            _ => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, found })
    }
}
