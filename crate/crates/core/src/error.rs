use thiserror::Error;

/// Errors produced anywhere in the estimation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// A parameter or input violated a documented invariant.
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// The requested operation is not available for this model or network.
    #[error("unsupported: {0}")]
    Unsupported(String),

    /// A simulated path left the finite region.
    #[error("path diverged at step {step}: {reason}")]
    PathDivergence { step: usize, reason: String },

    /// The training loss became non-finite.
    #[error("training diverged at epoch {epoch}")]
    TrainingDivergence { epoch: usize },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("config parse error: {0}")]
    ConfigParse(#[from] toml::de::Error),

    #[error("config serialize error: {0}")]
    ConfigSerialize(#[from] toml::ser::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }

    /// True for numerical blow-ups of either a path or a training run.
    pub fn is_divergence(&self) -> bool {
        matches!(
            self,
            Error::PathDivergence { .. } | Error::TrainingDivergence { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
