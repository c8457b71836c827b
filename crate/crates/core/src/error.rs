use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

/// Error type shared by the whole pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("{op}: invalid argument: {detail}")]
    Invalid { op: &'static str, detail: String },

    #[error("backward: {0}")]
    Graph(String),

    #[error("{op}: non-finite value encountered")]
    NonFinite { op: &'static str },

    #[error("{op}: numerical failure: {detail}")]
    Numerical { op: &'static str, detail: String },

    #[error("format error{}: {detail}", offset.map(|o| format!(" at byte {o}")).unwrap_or_default())]
    Format { detail: String, offset: Option<u64> },

    #[error("config: {0}")]
    Config(String),

    #[error("missing input file: {0}")]
    MissingFile(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub fn invalid(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Invalid { op, detail: detail.into() }
    }

    pub fn format(detail: impl Into<String>, offset: Option<u64>) -> Self {
        Error::Format { detail: detail.into(), offset }
    }
}
