use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("degenerate input to {op}: {detail}")]
    Degenerate { op: &'static str, detail: String },

    #[error("contract violation: {0}")]
    Contract(String),

    /// No anchor in the batch has an in-batch positive.
    #[error("no anchor in the batch has a positive pair")]
    EmptyPositive,

    #[error("data error{}: {detail}", line.map(|l| format!(" on line {l}")).unwrap_or_default())]
    Data { line: Option<usize>, detail: String },

    #[error("config error: {0}")]
    Config(String),

    /// A loss component or the gradient became NaN or infinite.
    #[error("non-finite {component} during training")]
    NonFinite { component: &'static str },

    #[error("gradient check failed: {0}")]
    GradCheck(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: malformed JSON: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn data(line: Option<usize>, detail: impl Into<String>) -> Self {
        Error::Data {
            line,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by numerics rather than by inputs or configuration.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFinite { .. } | Error::GradCheck(_))
    }
}
