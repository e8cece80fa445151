use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HdtError {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("index error: {0}")]
    Index(String),

    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("state error: {0}")]
    State(String),

    #[error("training error: {0}")]
    Training(String),

    /// A loss or gradient went non-finite during training.
    #[error("numerical abort at step {step}: {reason}{}", last_good_suffix(.last_good))]
    NumericalAbort {
        step: usize,
        reason: String,
        last_good: Option<PathBuf>,
    },

    #[error("ingestion error at line {line}{}: {message}", column_suffix(.column))]
    Ingestion {
        line: usize,
        column: Option<usize>,
        message: String,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn last_good_suffix(path: &Option<PathBuf>) -> String {
    match path {
        Some(p) => format!(" (last good checkpoint: {})", p.display()),
        None => " (no checkpoint written yet)".to_string(),
    }
}

fn column_suffix(column: &Option<usize>) -> String {
    match column {
        Some(c) => format!(", column {c}"),
        None => String::new(),
    }
}

pub type Result<T, E = HdtError> = std::result::Result<T, E>;

pub(crate) fn dim_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(HdtError::Dimension(msg.into()))
}
