use thiserror::Error;

pub type Result<T> = std::result::Result<T, SdeError>;

#[derive(Debug, Error)]
pub enum SdeError {
    /// A caller broke a shape or dimension precondition.
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("lookup failed: {0}")]
    Lookup(String),
    /// A loss term or gradient became non-finite during training.
    #[error("training diverged: non-finite {term}")]
    Divergence { term: String },
    #[error("loss mask selects no target positions")]
    EmptyTarget,
    #[error("config error: {0}")]
    Config(String),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl SdeError {
    pub fn contract(msg: impl Into<String>) -> Self {
        SdeError::Contract(msg.into())
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        SdeError::InvalidInput(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        SdeError::Format(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        SdeError::Config(msg.into())
    }

    pub fn divergence(term: impl Into<String>) -> Self {
        SdeError::Divergence { term: term.into() }
    }
}
