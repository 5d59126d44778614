use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("cycle detected in computation graph")]
    GraphCycle,

    #[error("invalid model spec: {0}")]
    InvalidSpec(String),

    #[error("corrupt record: {0}")]
    Corrupt(String),

    #[error("spec hash mismatch: teacher logits were produced for a different input contract ({0})")]
    SpecHashMismatch(String),

    #[error("missing teacher logits for image `{0}`")]
    MissingLogits(String),

    #[error("training diverged at iteration {iteration}: loss = {loss}")]
    Diverged { iteration: usize, loss: f64 },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("parse error in {path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable machine-readable code, used by the CLI error envelope.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::NonFinite(_) => "non_finite",
            Error::NonScalarLoss(_) => "non_scalar_loss",
            Error::GraphCycle => "graph_cycle",
            Error::InvalidSpec(_) => "invalid_spec",
            Error::Corrupt(_) => "corrupt",
            Error::SpecHashMismatch(_) => "spec_hash_mismatch",
            Error::MissingLogits(_) => "missing_logits",
            Error::Diverged { .. } => "diverged",
            Error::Io { .. } => "io",
            Error::Image { .. } => "image",
            Error::Json(_) => "json",
            Error::Parse { .. } => "parse",
        }
    }
}

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}
