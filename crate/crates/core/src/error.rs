use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("resolution mismatch: {0}x{0} vs {1}x{1}")]
    ResolutionMismatch(usize, usize),
    #[error("unsupported resolution {0} (expected one of 32, 64, 128, 256)")]
    UnsupportedResolution(usize),
    #[error("label map is not quantized to the palette")]
    Unquantized,
    #[error("invalid part {0:?}")]
    InvalidPart(String),
    #[error("alpha {0} outside [0, 1]")]
    InvalidAlpha(f64),
    #[error("mask is not binary")]
    NonBinaryMask,
    #[error("gene dimension mismatch: {0} vs {1}")]
    GeneDimension(usize, usize),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("corrupt archive {path}: {reason}")]
    CorruptArchive { path: PathBuf, reason: String },
    #[error("fingerprint mismatch: expected {expected}, found {found}")]
    Fingerprint { expected: String, found: String },
    #[error("missing checkpoint {0}")]
    MissingCheckpoint(PathBuf),
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] shapegene_tensor::TensorError),
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) trait IoContext<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T>;
}

impl<T> IoContext<T> for std::result::Result<T, std::io::Error> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T> {
        self.map_err(|source| Error::Io {
            path: path.into(),
            source,
        })
    }
}
