use std::path::PathBuf;

/// Errors raised anywhere in the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("character id {id} is outside the vocabulary of size {size}")]
    Vocabulary { id: usize, size: usize },

    #[error("input error: {0}")]
    Input(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("training diverged at epoch {epoch}: loss became non-finite (last finite loss {last_finite})")]
    Diverged { epoch: usize, last_finite: f64 },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("normalization error: {0}")]
    Normalization(String),

    #[error("format error in {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            detail: detail.into(),
        }
    }

    /// Process exit status for the command-line tool: 1 usage, 2 data, 3 numeric.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Config(_) => 1,
            Error::Numeric(_) | Error::Diverged { .. } => 3,
            Error::Dimension { .. }
            | Error::Vocabulary { .. }
            | Error::Input(_)
            | Error::Checkpoint(_)
            | Error::Normalization(_)
            | Error::Format { .. }
            | Error::Io { .. } => 2,
        }
    }
}
