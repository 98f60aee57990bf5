use std::path::PathBuf;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed NIfTI header: {0}")]
    Header(String),

    #[error("unsupported NIfTI datatype code {0}")]
    UnsupportedDatatype(i16),

    #[error("expected a 3D image, found {0} dimensions")]
    NotThreeD(usize),

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("geometry mismatch: {0}")]
    GeometryMismatch(String),

    #[error("index ({0}, {1}, {2}) out of range")]
    IndexOutOfRange(usize, usize, usize),

    #[error("value out of range: {0}")]
    ValueOutOfRange(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("no Zone-1 voxel present; distance field undefined")]
    NoAllowedZone,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("statistic undefined: {0}")]
    Undefined(String),

    #[error("non-finite evaluation at coordinate {0}")]
    NonFinite(usize),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
