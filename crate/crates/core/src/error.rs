use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("time {t} outside of the valid range [{lo}, {hi}]")]
    TimeRange { t: f64, lo: f64, hi: f64 },

    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: usize, got: usize },

    #[error("invalid parameter `{field}`: {reason}")]
    Invalid { field: String, reason: String },

    #[error("unsupported dimension {0} (field dumps require D = 2)")]
    UnsupportedDim(usize),

    #[error("non-finite loss at epoch {epoch}, step {step}: dsm={dsm}, penalty={penalty}")]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        dsm: f64,
        penalty: f64,
    },

    #[error("non-finite sampler state at step {0}")]
    NonFiniteState(usize),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("csv error: {0}")]
    Csv(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Invalid {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_len(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::Shape { expected, got });
    }
    Ok(())
}
