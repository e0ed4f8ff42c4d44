use thiserror::Error;

/// Errors raised across the reconstruction pipeline.
#[derive(Debug, Error)]
pub enum ReconError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("index out of range: {0}")]
    IndexOutOfRange(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("non-finite cost at stage {stage}, step {step}: data={data:e} network={network:e} temporal={temporal:e}")]
    Diverged {
        stage: usize,
        step: usize,
        data: f64,
        network: f64,
        temporal: f64,
    },

    #[error("reference has zero norm")]
    ZeroReference,

    #[error("archive format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, ReconError>;
