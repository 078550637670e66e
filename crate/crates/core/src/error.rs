use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("step {index} out of range 0..={max}")]
    Index { index: usize, max: usize },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("noise level {level} is unreachable; the schedule tops out at {max}")]
    LevelUnreachable { level: f64, max: f64 },

    #[error("start step {step} is unreachable; the schedule has {max} steps")]
    StepUnreachable { step: usize, max: usize },

    #[error("degenerate kernel: {0}")]
    DegenerateKernel(String),

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("non-finite loss at step {step} (k = {k})")]
    NonFiniteLoss { step: u64, k: usize },

    #[error("parse error at byte {offset}: {reason}")]
    Parse { offset: usize, reason: String },

    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),

    #[error("corrupt checkpoint at byte {offset}: {reason}")]
    CorruptCheckpoint { offset: usize, reason: String },

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    UnsupportedVersion { found: u32, expected: u32 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Stable, machine-parseable category name.
    pub fn category(&self) -> &'static str {
        match self {
            Error::InvalidArgument(_) => "invalid-argument",
            Error::Index { .. } => "index",
            Error::Domain(_) => "domain",
            Error::LevelUnreachable { .. } => "level-unreachable",
            Error::StepUnreachable { .. } => "level-unreachable",
            Error::DegenerateKernel(_) => "degenerate-kernel",
            Error::Shape { .. } => "shape",
            Error::Contract(_) => "contract",
            Error::Config(_) => "config",
            Error::NonFiniteLoss { .. } => "non-finite-loss",
            Error::Parse { .. } => "parse",
            Error::UnsupportedFormat(_) => "unsupported-format",
            Error::CorruptCheckpoint { .. } => "corrupt-checkpoint",
            Error::UnsupportedVersion { .. } => "unsupported-version",
            Error::Io { .. } => "io",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
