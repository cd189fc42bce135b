use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("degenerate channel: |r[{index}][{index}]| = {value:e} is below 1e-12")]
    DegenerateChannel { index: usize, value: f64 },

    #[error("symbol {value} is not in the PAM alphabet")]
    InvalidSymbol { value: f64 },

    #[error("search space of {size} candidates exceeds the cap of {cap}")]
    Capacity { size: f64, cap: u64 },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: usize, actual: usize },

    #[error("contract violation: {0}")]
    ContractViolation(&'static str),

    #[error("training diverged at update {update}: {what}")]
    TrainingDivergence { update: usize, what: String },

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("unsupported checkpoint version {found} (this build reads version {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },

    #[error("corrupt checkpoint: {0}")]
    Corruption(String),

    #[error("configuration error: {0}")]
    Configuration(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    /// Whether the failure came from floating-point arithmetic rather than
    /// from bad input or configuration.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Numerical(_) | Error::TrainingDivergence { .. } | Error::DegenerateChannel { .. }
        )
    }
}
