use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: {left:?} vs {right:?}")]
    ShapeMismatch {
        context: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("empty input to {0}")]
    EmptyInput(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("training data contains a single class only")]
    SingleClass,

    #[error("AUROC undefined: input contains a single class only")]
    AurocUndefined,

    #[error("checkpoint error in section `{section}`: {detail}")]
    Checkpoint { section: &'static str, detail: String },

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("PNG error: {0}")]
    Png(String),

    #[error("{failed} of {total} records failed (>{limit_pct}% limit); first: {first}")]
    TooManyRecordFailures {
        failed: usize,
        total: usize,
        limit_pct: u8,
        first: String,
    },

    #[error("HTTP error: {0}")]
    Http(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<png::EncodingError> for Error {
    fn from(e: png::EncodingError) -> Self {
        Error::Png(e.to_string())
    }
}

impl From<png::DecodingError> for Error {
    fn from(e: png::DecodingError) -> Self {
        Error::Png(e.to_string())
    }
}

impl From<reqwest::Error> for Error {
    fn from(e: reqwest::Error) -> Self {
        Error::Http(e.to_string())
    }
}
