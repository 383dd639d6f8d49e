use thiserror::Error;

/// Errors raised by the numeric kernels, the model, the sampler and the analyses.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("empty set: {0}")]
    EmptySet(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("invalid state: {0}")]
    InvalidState(String),

    /// A cache or frozen-input row that must be valid was not.
    #[error("state corruption: {0}")]
    StateCorruption(String),

    #[error("no work: {0}")]
    NoWork(String),

    #[error("internal consistency violated: {0}")]
    InternalConsistency(String),

    #[error("undefined estimate: {0}")]
    UndefinedEstimate(String),

    #[error("weight file: {0}")]
    WeightFile(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// True for errors that signal a broken invariant at run time rather than bad configuration.
    pub fn is_invariant_violation(&self) -> bool {
        matches!(
            self,
            Error::StateCorruption(_) | Error::InternalConsistency(_) | Error::InvalidState(_)
        )
    }
}
