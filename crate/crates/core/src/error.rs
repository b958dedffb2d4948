use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid bounding box: {0}")]
    InvalidBox(String),

    #[error("invalid probability vector: {0}")]
    InvalidProbs(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("detection #{index} from model `{model}` references image {image} which is not in the corpus")]
    UnknownImage {
        index: usize,
        model: String,
        image: u64,
    },

    #[error("unknown model `{0}`")]
    UnknownModel(String),

    #[error("category `{0}` is not supported by any registered model")]
    UnsupportedCategory(String),

    #[error("model `{model}` emitted category `{category}` outside its declared set")]
    CategoryOutsideModel { model: String, category: String },

    #[error("{path}: {message}")]
    Data { path: PathBuf, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("endpoint {endpoint}: {message}")]
    Endpoint { endpoint: String, message: String },

    #[error("evaluation: {0}")]
    Evaluation(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn data(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Data {
            path: path.into(),
            message: message.into(),
        }
    }

    /// True for failures of the environment (filesystem, network) rather than
    /// of the data or configuration.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io { .. } | Error::Endpoint { .. })
    }
}
