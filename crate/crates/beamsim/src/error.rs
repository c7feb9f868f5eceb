use std::path::PathBuf;

/// Errors produced by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("numeric failure: {0}")]
    NumericFailure(String),

    #[error("degenerate channel: {0}")]
    DegenerateChannel(String),

    #[error("degenerate output: {0}")]
    DegenerateOutput(String),

    #[error("unsupported configuration: {0}")]
    UnsupportedConfiguration(String),

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("framing error: {0}")]
    Framing(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("missing checkpoint: expected file at {0}")]
    MissingCheckpoint(PathBuf),

    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::NumericFailure(msg.into())
    }
}
