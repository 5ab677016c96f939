use std::io;

use thiserror::Error;

/// Errors raised anywhere in the classification pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: expected {expected}, got {got} ({context})")]
    Dimension {
        expected: usize,
        got: usize,
        context: &'static str,
    },

    #[error("empty flow")]
    EmptyFlow,

    #[error("degenerate task: {0}")]
    DegenerateTask(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("incomplete trace: {0}")]
    IncompleteTrace(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("diagnostic error: {0}")]
    Diagnostic(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_len(expected: usize, got: usize, context: &'static str) -> Result<()> {
    if expected != got {
        return Err(Error::Dimension {
            expected,
            got,
            context,
        });
    }
    Ok(())
}
