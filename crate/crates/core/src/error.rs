use std::path::PathBuf;

/// Errors produced anywhere in the extraction pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A domain invariant was violated. `field` is a dotted path into the value.
    #[error("invalid `{field}`: {reason}")]
    Invalid { field: String, reason: String },

    /// Configuration could not be constructed or parsed.
    #[error("config error: {0}")]
    Config(String),

    /// Tensor or sequence shapes disagree.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A line-oriented text file could not be parsed.
    #[error("{path}:{line}: {reason}")]
    Parse {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    /// Two checkpoints (or a checkpoint and its inputs) are incompatible.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Training produced a non-finite loss.
    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },

    /// An external plugin executable failed or produced malformed output.
    #[error("plugin error: {0}")]
    Plugin(String),

    /// Preference construction produced nothing usable.
    #[error("no usable preference pairs: {0}")]
    NoPairs(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("wav error: {0}")]
    Wav(#[from] hound::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Invalid {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
