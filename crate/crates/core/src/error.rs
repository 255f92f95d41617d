use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised by the alignment engine.
///
/// `Config` and `Format` cover validation failures (bad flags, malformed
/// files, mismatched dimensions); `NonFinite` covers runtime numerical
/// failures. The CLI maps the former to exit code 1 and the latter to 2.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {context}: expected {expected:?}, got {got:?}")]
    Shape {
        context: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("file format error: {0}")]
    Format(String),

    #[error("non-finite value in {context}{}", batch.map(|b| format!(" (batch {b})")).unwrap_or_default())]
    NonFinite {
        context: &'static str,
        batch: Option<usize>,
    },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn shape(context: &'static str, expected: &[usize], got: &[usize]) -> Self {
        Error::Shape {
            context,
            expected: expected.to_vec(),
            got: got.to_vec(),
        }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub fn non_finite(context: &'static str) -> Self {
        Error::NonFinite {
            context,
            batch: None,
        }
    }

    /// True for failures of numeric evaluation rather than of inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::NonFinite { .. })
    }
}
