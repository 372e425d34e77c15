use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes disagree. `axes` names the offending dimensions.
    #[error("{op}: dimension mismatch on {axes}: {detail}")]
    Shape {
        op: &'static str,
        axes: String,
        detail: String,
    },

    #[error("{context}: non-finite value encountered")]
    NonFinite { context: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("range error: {0}")]
    Range(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("usage error: {0}")]
    Usage(String),

    /// Source-domain and target-domain content overlap.
    #[error("held-out leakage: {0} target sample(s) also appear in the training data")]
    Leakage(usize),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, axes: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            axes: axes.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad input rather than a numeric or runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Validation(_)
                | Error::Config(_)
                | Error::Usage(_)
                | Error::Range(_)
                | Error::Shape { .. }
                | Error::Io { .. }
                | Error::Format(_)
        )
    }
}
