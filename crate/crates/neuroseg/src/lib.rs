//! Filesystem, configuration, and command plumbing around `neuroseg-core`.
//!
//! The core crate owns all numerics; this crate owns everything that
//! touches a disk: volume and checkpoint formats, dataset layout, the
//! training loop with history/early stopping, reports, and the CLI.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod pgm;
pub mod report;
pub mod train;
pub mod volume_io;

use std::fmt;

use neuroseg_core::CoreError;

/// Process-level failure. Variants map one-to-one onto exit codes so the
/// binary's contract is testable: config/data/IO problems exit 2, a
/// non-finite loss exits 3, and failed verification checks exit 1.
#[derive(Debug)]
pub enum AppError {
    /// Bad configuration, missing or malformed files, invalid data.
    Config(String),
    /// Training aborted on a non-finite value.
    Nan { iteration: u64, alpha: f64, lr: f64 },
    /// A verification command found failures (gradient checks).
    Check(String),
}

pub type Result<T> = std::result::Result<T, AppError>;

impl AppError {
    pub fn exit_code(&self) -> i32 {
        match self {
            AppError::Config(_) => 2,
            AppError::Nan { .. } => 3,
            AppError::Check(_) => 1,
        }
    }

    pub fn config(message: impl Into<String>) -> Self {
        AppError::Config(message.into())
    }
}

impl fmt::Display for AppError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AppError::Config(m) => write!(f, "{m}"),
            AppError::Nan { iteration, alpha, lr } => write!(
                f,
                "training aborted: non-finite loss at iteration {iteration} (last alpha {alpha}, lr {lr})"
            ),
            AppError::Check(m) => write!(f, "{m}"),
        }
    }
}

impl std::error::Error for AppError {}

impl From<CoreError> for AppError {
    fn from(e: CoreError) -> Self {
        AppError::Config(e.to_string())
    }
}

impl From<std::io::Error> for AppError {
    fn from(e: std::io::Error) -> Self {
        AppError::Config(e.to_string())
    }
}

impl From<serde_json::Error> for AppError {
    fn from(e: serde_json::Error) -> Self {
        AppError::Config(e.to_string())
    }
}
