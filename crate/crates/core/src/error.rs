use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("training diverged ({}batch {batch}): loss = {loss}", .iteration.map(|k| format!("iteration {k}, ")).unwrap_or_default())]
    Divergence {
        iteration: Option<usize>,
        batch: usize,
        loss: f64,
    },

    #[error("non-finite gradient at iteration {iteration}")]
    NonFiniteGradient { iteration: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("parameter layout mismatch: {0}")]
    Layout(String),

    #[error("parse error in {path} at byte {offset}: {message}")]
    Parse {
        path: PathBuf,
        offset: u64,
        message: String,
    },

    #[error("{path}: row {row}: {message}")]
    Csv {
        path: PathBuf,
        row: usize,
        message: String,
    },

    #[error("trajectory format: {0}")]
    Format(String),

    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },

    #[error("replay diverged at step {step}: stored loss {stored:e}, regenerated {regenerated:e}")]
    ReplayDivergence {
        step: usize,
        stored: f64,
        regenerated: f64,
    },

    #[error("analysis error at step {step}: {message}")]
    Analysis { step: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
