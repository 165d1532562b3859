use std::path::PathBuf;

use thiserror::Error;

use crate::fingerprint::GenerationFailure;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("failed to ingest {}: {reason}", file.display())]
    Ingestion { file: PathBuf, reason: String },

    #[error("invalid image batch: {0}")]
    InvalidBatch(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    Divergence { epoch: usize, loss: f64 },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("unknown layer `{0}`")]
    UnknownLayer(String),

    #[error("shape mismatch for `{layer}`: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        layer: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("degenerate weight range [{0}, {1}]")]
    DegenerateRange(f64, f64),

    #[error("watermark of {requested} digits exceeds layer capacity of {capacity}")]
    Capacity { requested: usize, capacity: usize },

    #[error("watermark extraction failed: {0}")]
    Extraction(String),

    #[error("fingerprint generation failed: {0}")]
    Generation(Box<GenerationFailure>),

    #[error("authentication failed: input was not admitted by the control layer")]
    AuthenticationFailed,

    #[error("access denied: session was not granted")]
    AccessDenied,

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
