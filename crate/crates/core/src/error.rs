use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("line {line}: timestamp {t} precedes previous timestamp {previous}")]
    NonMonotonic { line: usize, t: u64, previous: u64 },

    #[error("line {line}: duplicate or decreasing label timestamp {t}")]
    DuplicateTimestamp { line: usize, t: u64 },

    #[error("line {line}: coordinate ({x}, {y}) outside {width}x{height} sensor")]
    OutOfBounds {
        line: usize,
        x: i64,
        y: i64,
        width: u32,
        height: u32,
    },

    #[error("invalid tensor file: {0}")]
    Format(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("tensor `{name}`: {message}")]
    Weights { name: String, message: String },

    #[error("{0}")]
    Domain(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    /// Short machine-readable category, used as the CLI error prefix.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Parse { .. } => "parse",
            Error::NonMonotonic { .. } => "non-monotonic",
            Error::DuplicateTimestamp { .. } => "duplicate-timestamp",
            Error::OutOfBounds { .. } => "out-of-bounds",
            Error::Format(_) => "format",
            Error::Shape(_) => "shape",
            Error::Config(_) => "config",
            Error::Weights { .. } => "weights",
            Error::Domain(_) => "domain",
            Error::Json(_) => "json",
        }
    }
}
