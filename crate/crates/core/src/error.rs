use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("non-finite values produced by {op}")]
    NonFinite { op: &'static str },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{0}")]
    Validation(String),

    #[error("token {token} out of range for vocabulary of size {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },

    #[error("sequence length {len} outside [1, {max}]")]
    BadSequenceLength { len: usize, max: usize },

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f32 },

    #[error("checkpoint format: {0}")]
    Format(#[from] FormatError),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Checkpoint container errors. Each corruption mode is reported distinctly so
/// callers (and the CLI exit codes) can tell them apart.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum FormatError {
    #[error("bad magic bytes (not a MOEF file)")]
    BadMagic,

    #[error("unsupported container version {0}")]
    UnsupportedVersion(u32),

    #[error("file truncated: {0}")]
    Truncated(String),

    #[error("malformed header: {0}")]
    Header(String),

    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Stable machine-readable category, used by the CLI for error reporting
    /// and exit codes.
    pub fn category(&self) -> &'static str {
        match self {
            Error::ShapeMismatch { .. } => "shape",
            Error::NonFinite { .. } => "numeric",
            Error::Config(_) => "config",
            Error::Validation(_) => "validation",
            Error::TokenOutOfRange { .. } => "token",
            Error::BadSequenceLength { .. } => "sequence",
            Error::DegenerateInput(_) => "degenerate",
            Error::Diverged { .. } => "diverged",
            Error::Format(_) => "format",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }
}
