use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = HsidError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum HsidError {
    #[error("format error: {0}")]
    Format(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("calibration failed for band {band}: {reason}")]
    Calibration { band: usize, reason: String },
    #[error("degenerate distribution: {0}")]
    DegenerateDistribution(String),
    #[error("state error: {0}")]
    State(String),
    #[error("numeric abort at step {step} (lr {lr}, grad norm {grad_norm}): {reason}")]
    Numeric { step: usize, lr: f64, grad_norm: f64, reason: String },
    #[error("config error: {0}")]
    Config(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl HsidError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HsidError::Io { path: path.into(), source }
    }
}

pub(crate) fn arg(msg: impl Into<String>) -> HsidError {
    HsidError::Argument(msg.into())
}
