use crate::grid::GridDims;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {0} vs {1}")]
    DimMismatch(GridDims, GridDims),

    #[error("degenerate mask: {0}")]
    DegenerateMask(&'static str),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid class id {class_id} (training set has {n_classes} classes)")]
    InvalidClass { class_id: usize, n_classes: usize },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("{path}: {msg}")]
    Dataset { path: String, msg: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {source}")]
    Image {
        path: String,
        #[source]
        source: image::ImageError,
    },
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn dataset(path: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Dataset { path: path.into(), msg: msg.into() }
    }
}
