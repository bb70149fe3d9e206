use std::path::PathBuf;

/// Error type shared by all modules in this crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("cannot decode {path}: {source}")]
    ImageFormat {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("size error: {0}")]
    Size(String),

    #[error("weight format error: {0}")]
    WeightFormat(String),

    #[error("checkpoint format error: {0}")]
    CheckpointFormat(String),

    #[error("no usable images under {0}")]
    EmptyDataset(PathBuf),

    #[error("non-finite {quantity} at iteration {iteration}; aborting")]
    NonFinite { quantity: String, iteration: usize },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
