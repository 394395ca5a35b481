use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("tiff: {0}")]
    Tiff(#[from] tiff::TiffError),

    #[error("image encoding: {0}")]
    Image(#[from] image::ImageError),

    #[error("invalid band manifest: {0}")]
    Manifest(String),

    #[error("manifest has no band at {0} nm")]
    MissingBand(u32),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("channel mismatch: model expects {expected} channels, got {got}")]
    ChannelMismatch { expected: usize, got: usize },

    #[error("unknown annotation label {0:?}")]
    UnknownLabel(String),

    #[error("malformed annotation document: {0}")]
    Annotation(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("infeasible plate spec: {0}")]
    InfeasibleSpec(String),

    #[error("non-finite {component} loss")]
    NonFiniteLoss { component: &'static str },

    #[error("training diverged at epoch {epoch} ({component} loss non-finite)")]
    Diverged {
        epoch: usize,
        component: &'static str,
        last_good: Box<crate::model::Checkpoint>,
    },

    #[error("checkpoint format: {0}")]
    Checkpoint(String),

    #[error("plot: {0}")]
    Plot(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
