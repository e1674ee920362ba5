use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes or hyper-parameters that cannot work together.
    #[error("configuration error: {0}")]
    Config(String),

    /// Caller supplied inputs that violate an operation's contract.
    #[error("usage error: {0}")]
    Usage(String),

    #[error("training diverged at step {step} of {stage}: loss = {loss}")]
    Diverged { stage: String, step: usize, loss: f64 },

    #[error("frozen parameter group `{group}` changed during {stage}")]
    ChecksumDrift { stage: String, group: String },

    #[error("frozen parameter group `{group}` received a non-zero gradient (norm {norm}) during {stage}")]
    FrozenGradient { stage: String, group: String, norm: f64 },

    #[error("missing prerequisite: {0}")]
    MissingPrerequisite(String),

    #[error("malformed container {path}: {reason}")]
    Format { path: String, reason: String },

    #[error("{0} already exists (pass --overwrite to replace it)")]
    Exists(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("invalid config file: {0}")]
    Toml(#[from] toml::de::Error),

    #[error("png encoding failed: {0}")]
    Png(#[from] png::EncodingError),
}

impl Error {
    /// True for errors caused by the caller rather than by a bug or a
    /// numerical failure.
    pub fn is_user_error(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::Usage(_) | Error::MissingPrerequisite(_) | Error::Exists(_) | Error::Toml(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
