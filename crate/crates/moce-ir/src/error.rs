//! Crate-wide error type.

use std::fmt;

/// Errors surfaced by tensor ops, configuration, training and persistence.
#[derive(Debug)]
pub enum MoceError {
    /// Shape disagreement between operands; carries both shapes.
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// Invalid configuration value (divisibility, ranges, unknown modes).
    Config(String),
    /// A contract precondition was violated at runtime.
    Contract(String),
    /// A NaN was produced; names the first offending operation.
    Nan { op: String },
    /// Checkpoint or log I/O failure.
    Io(std::io::Error),
    /// Checkpoint is structurally invalid or fails its CRC.
    Corrupt(String),
    /// Config-file parse failure with a 1-based line number.
    Parse { line: usize, message: String },
}

impl fmt::Display for MoceError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MoceError::Dimension { op, lhs, rhs } => {
                write!(f, "{op}: dimension mismatch between {lhs:?} and {rhs:?}")
            }
            MoceError::Config(msg) => write!(f, "configuration error: {msg}"),
            MoceError::Contract(msg) => write!(f, "contract violation: {msg}"),
            MoceError::Nan { op } => write!(f, "NaN produced by {op}"),
            MoceError::Io(e) => write!(f, "io error: {e}"),
            MoceError::Corrupt(msg) => write!(f, "corrupt checkpoint: {msg}"),
            MoceError::Parse { line, message } => write!(f, "parse error at line {line}: {message}"),
        }
    }
}

impl std::error::Error for MoceError {}

impl From<std::io::Error> for MoceError {
    fn from(e: std::io::Error) -> Self {
        MoceError::Io(e)
    }
}

pub type Result<T> = std::result::Result<T, MoceError>;
