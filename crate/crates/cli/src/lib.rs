//! Pipeline orchestration for the `bttf-lab` binary: dataset generation,
//! training, explanation runs, evaluation, and the ordering-reproduction suite.

pub mod checkpoints;
pub mod commands;
pub mod config;
pub mod manifest;
pub mod suite;

use std::fmt;

pub use bttf_core;

/// Process exit status for each failure class.
pub mod exit {
    pub const OK: i32 = 0;
    pub const VALIDATION: i32 = 2;
    pub const RUNTIME: i32 = 3;
    pub const NUMERICAL: i32 = 4;
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Validation(String),
    Core(bttf_core::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        use bttf_core::Error as E;
        match self {
            CliError::Usage(_) | CliError::Validation(_) => exit::VALIDATION,
            CliError::Core(e) => match e.root() {
                E::Config { .. } | E::Shape(_) | E::ClassIndex { .. } | E::InvalidVideo(_) | E::Format(_) | E::Json(_) => {
                    exit::VALIDATION
                }
                E::Diverged { .. } | E::NonFinite { .. } | E::Numerical(_) => exit::NUMERICAL,
                E::Io { .. } | E::Empty(_) | E::Stage { .. } => exit::RUNTIME,
            },
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage: {m}"),
            CliError::Validation(m) => write!(f, "invalid configuration: {m}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<bttf_core::Error> for CliError {
    fn from(e: bttf_core::Error) -> Self {
        CliError::Core(e)
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(e.into())
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Worker count: `BTTF_LAB_THREADS` wins over `--jobs`; unset or 0 means rayon's default.
pub fn resolve_jobs(flag: Option<usize>) -> Option<usize> {
    std::env::var("BTTF_LAB_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .or(flag)
        .filter(|&n| n > 0)
}
