use std::io;

use thiserror::Error;

/// Every failure the engine can report. Variants map onto the contract
/// violations of the individual operations.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),
    #[error("corrupted state: {0}")]
    CorruptedState(String),
    #[error("label {label} out of range for {classes} classes")]
    LabelRange { label: u8, classes: usize },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("dataset id {id} out of range for a bank of {banks}")]
    Switch { id: usize, banks: usize },
    #[error("label mapping error: {0}")]
    Mapping(String),
    #[error("dataset alternation error: {0}")]
    Alternation(String),
    #[error("schedule error: iteration {iter} beyond max_iter {max_iter}")]
    Schedule { iter: usize, max_iter: usize },
    #[error("architecture error: {0}")]
    Architecture(String),
    #[error("comparison error: {0}")]
    Comparison(String),
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
