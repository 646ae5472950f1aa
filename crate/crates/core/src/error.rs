use thiserror::Error;

/// Errors raised by tensor algebra, fitting, volume handling and metrics.
#[derive(Debug, Error)]
pub enum DtiError {
    #[error("invalid gradient scheme: {0}")]
    InvalidScheme(String),

    #[error("insufficient measurements: need at least 6 diffusion-weighted entries, got {0}")]
    InsufficientMeasurements(usize),

    #[error("singular design matrix (condition number {condition:.3e})")]
    SingularDesign { condition: f64 },

    #[error("log-domain error: {0}")]
    LogDomain(String),

    #[error("invalid vector: {0}")]
    InvalidVector(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("volume format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = DtiError> = std::result::Result<T, E>;
