use thiserror::Error;

#[derive(Debug, Error)]
pub enum CvdmError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("domain error: {0}")]
    Domain(String),

    /// A division by a vanishing variance or signal coefficient was requested.
    #[error("singularity: {0}")]
    Singularity(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("optics sampling violation: {0}")]
    Sampling(String),

    #[error("numerical method failed: {0}")]
    Numerical(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = CvdmError> = std::result::Result<T, E>;
