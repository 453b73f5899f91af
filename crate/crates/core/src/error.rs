use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("training diverged at iteration {iteration}: non-finite loss")]
    TrainingDiverged { iteration: usize },

    #[error("corrupt header at byte {offset}: {reason}")]
    CorruptHeader { offset: usize, reason: String },

    #[error("truncated payload at byte {offset}: needed {needed} more bytes, {available} available")]
    TruncatedPayload {
        offset: usize,
        needed: usize,
        available: usize,
    },

    #[error("unsupported format version {found} at byte {offset} (reader supports {supported})")]
    VersionUnsupported { offset: usize, found: u32, supported: u32 },

    #[error("config error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}
