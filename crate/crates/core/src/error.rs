use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not conform for the named op.
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// A value outside the numeric domain of an op (NaN or infinity).
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// Caller broke a documented precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("unknown word(s) not in vocabulary: {0}")]
    UnknownWord(String),

    /// A clip spec whose trajectory would leave the frame.
    #[error("clip spec rejected: {0}")]
    SpecRejected(String),

    #[error("version mismatch in {what}: found {found}, expected {expected}")]
    Version { what: String, found: u32, expected: u32 },

    #[error("truncated record in {0}")]
    Truncated(String),

    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Stable short name of the variant, for machine-readable diagnostics.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::NonFinite(_) => "non-finite",
            Error::Contract(_) => "contract",
            Error::UnknownWord(_) => "unknown-word",
            Error::SpecRejected(_) => "spec-rejected",
            Error::Version { .. } => "version",
            Error::Truncated(_) => "truncated",
            Error::DimMismatch(_) => "dim-mismatch",
            Error::Checkpoint(_) => "checkpoint",
            Error::Config(_) => "config",
            Error::Validation(_) => "validation",
            Error::Io { .. } => "io",
        }
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
