use std::path::PathBuf;

/// Errors surfaced by the pipeline library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid volume: {0}")]
    InvalidVolume(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("ledger error: {0}")]
    Ledger(String),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("missing prerequisite: {0}")]
    MissingPrerequisite(String),
    #[error("format error in {path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Nn(#[from] sourceaware_nn::NnError),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Short machine-readable category, used for one-line CLI errors.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidVolume(_) => "invalid_volume",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::ShapeMismatch { .. } => "shape_mismatch",
            Error::NonFinite(_) => "non_finite",
            Error::Degenerate(_) => "degenerate",
            Error::Ledger(_) => "ledger",
            Error::Diverged(_) => "diverged",
            Error::MissingPrerequisite(_) => "missing_prerequisite",
            Error::Format { .. } => "format",
            Error::Io { .. } => "io",
            Error::Nn(_) => "nn",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
