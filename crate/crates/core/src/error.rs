use std::path::PathBuf;

use odeadv_autograd::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid range: lo {lo} > hi {hi}")]
    InvalidRange { lo: f64, hi: f64 },
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("label error: {0}")]
    Label(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite value at {0}")]
    NonFinite(String),
    #[error("undefined denominator: {0}")]
    EmptyDenominator(String),
    #[error("{path}: parse error at byte {offset}: {msg}")]
    Parse { path: PathBuf, offset: usize, msg: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
