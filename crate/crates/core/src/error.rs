use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = DplError> = std::result::Result<T, E>;

/// Every failure the library can report.
///
/// Variants are grouped by how a caller is expected to react: bad input data
/// (`Format`, `Dimension`, `Index`, `Checkpoint`, `Io`, `Config`) versus
/// numeric breakdown during computation (`Numeric`, `NonFiniteGradient`,
/// `Degenerate`).
#[derive(Debug, Error)]
pub enum DplError {
    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    Dimension {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("index {index} out of range for {context} of length {len}")]
    Index {
        context: &'static str,
        index: usize,
        len: usize,
    },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("non-finite gradient at step {step} in `{group}` (max |g| = {max_abs})")]
    NonFiniteGradient {
        step: u64,
        group: &'static str,
        max_abs: f64,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{}", format_location(.path, .row, .message))]
    Format {
        path: Option<PathBuf>,
        row: Option<usize>,
        message: String,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("I/O error on {}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("internal error: {0}")]
    Internal(String),
}

fn format_location(path: &Option<PathBuf>, row: &Option<usize>, message: &str) -> String {
    match (path, row) {
        (Some(p), Some(r)) => format!("format error in {} at row {r}: {message}", p.display()),
        (Some(p), None) => format!("format error in {}: {message}", p.display()),
        (None, Some(r)) => format!("format error at row {r}: {message}"),
        (None, None) => format!("format error: {message}"),
    }
}

impl DplError {
    pub(crate) fn format(message: impl Into<String>) -> Self {
        DplError::Format {
            path: None,
            row: None,
            message: message.into(),
        }
    }

    pub(crate) fn format_at(row: usize, message: impl Into<String>) -> Self {
        DplError::Format {
            path: None,
            row: Some(row),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DplError::Io {
            path: path.into(),
            source,
        }
    }

    /// Attach a file path to a format error that was raised without one.
    pub(crate) fn with_path(self, p: &std::path::Path) -> Self {
        match self {
            DplError::Format {
                path: None,
                row,
                message,
            } => DplError::Format {
                path: Some(p.to_path_buf()),
                row,
                message,
            },
            other => other,
        }
    }

    /// True for failures that stem from numeric breakdown rather than bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            DplError::Numeric(_) | DplError::NonFiniteGradient { .. } | DplError::Degenerate(_)
        )
    }
}
