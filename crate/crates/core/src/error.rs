use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("computation graph already released by a previous backward pass")]
    GraphReleased,

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("missing frame (demo {demo}, view {view}, t {t})")]
    MissingFrame { demo: usize, view: usize, t: usize },

    #[error("training diverged at epoch {epoch}, batch {batch}: loss {loss} (recent: {history:?})")]
    Diverged {
        epoch: usize,
        batch: usize,
        loss: f64,
        history: Vec<f64>,
    },

    #[error("environment error: {0}")]
    Env(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-parseable category, used for CLI exit lines.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Shape { .. } | Error::NonScalarLoss(_) | Error::GraphReleased => "shape",
            Error::NonFiniteGradient(_) | Error::Diverged { .. } => "numeric",
            Error::InvalidArgument(_) | Error::Config(_) => "config",
            Error::Io { .. } => "io",
            Error::Format(_) | Error::Json(_) => "format",
            Error::Checkpoint(_) => "checkpoint",
            Error::Dataset(_) | Error::MissingFrame { .. } => "dataset",
            Error::Env(_) => "env",
        }
    }
}
