use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by the training framework.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: `{field}`: {reason}")]
    Config { field: &'static str, reason: String },

    #[error("shape mismatch in {context}: expected {expected:?}, got {actual:?}")]
    Shape {
        context: &'static str,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("timestep {t} out of range for a schedule with {num_steps} steps")]
    TimestepOutOfRange { t: usize, num_steps: usize },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("singular conversion from {from} to {to} at t={t}: {coefficient} coefficient is zero")]
    Singular {
        from: &'static str,
        to: &'static str,
        t: usize,
        coefficient: &'static str,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("conditioning mismatch: {0}")]
    Conditioning(String),

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("weight set mismatch: {0}")]
    Weights(String),

    #[error("schedule mismatch: {0}")]
    ScheduleMismatch(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("training aborted at step {step}: {reason}")]
    Diverged { step: u64, reason: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn config(field: &'static str, reason: impl Into<String>) -> Self {
        Error::Config {
            field,
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
