//! Experiment harness around `krada-core`: dataset files, checkpoints,
//! configs, CSV reports, and the orchestration behind the `krada` binary.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod metricsfmt;
pub mod pnm;
pub mod report;
pub mod run;

use std::fmt;

/// Harness-level failures, split by who has to fix them. The split decides
/// the process exit code: bad configuration exits 2, unreadable or
/// inconsistent files exit 3, numerical blow-ups exit 4.
#[derive(Debug)]
pub enum LabError {
    Config(String),
    Data(String),
    Numeric(String),
}

impl fmt::Display for LabError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LabError::Config(m) => write!(f, "config error: {m}"),
            LabError::Data(m) => write!(f, "data error: {m}"),
            LabError::Numeric(m) => write!(f, "numerical error: {m}"),
        }
    }
}

impl std::error::Error for LabError {}

impl LabError {
    pub fn exit_code(&self) -> i32 {
        match self {
            LabError::Config(_) => 2,
            LabError::Data(_) => 3,
            LabError::Numeric(_) => 4,
        }
    }
}

impl From<std::io::Error> for LabError {
    fn from(e: std::io::Error) -> Self {
        LabError::Data(e.to_string())
    }
}

impl From<krada_core::Error> for LabError {
    fn from(e: krada_core::Error) -> Self {
        match e {
            krada_core::Error::NonFinite(_) => LabError::Numeric(e.to_string()),
            other => LabError::Data(other.to_string()),
        }
    }
}

pub type Result<T> = std::result::Result<T, LabError>;

/// `Data`-flavored convenience for file paths in messages.
pub(crate) fn data_err(msg: impl Into<String>) -> LabError {
    LabError::Data(msg.into())
}

pub(crate) fn config_err(msg: impl Into<String>) -> LabError {
    LabError::Config(msg.into())
}
