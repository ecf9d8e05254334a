use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("frequency {frequency} cycles/FOV exceeds the Nyquist limit of {limit} for a {image_size}px image")]
    NyquistViolation {
        frequency: f64,
        limit: f64,
        image_size: usize,
    },

    #[error("size mismatch: {0}")]
    SizeMismatch(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("zero-variance series at voxel {voxel}")]
    ZeroVariance { voxel: usize },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("split sizes {requested} exceed the {available} available samples")]
    SizeOverflow { requested: usize, available: usize },

    #[error("no candidate layers supplied")]
    EmptyCandidates,

    #[error("feature matrix for layer {0} is missing")]
    MissingLayerFeatures(u32),

    #[error("no voxel is above threshold under either model")]
    NoEligibleVoxels,

    #[error("partition mismatch: {0}")]
    PartitionMismatch(String),

    #[error("bad magic {found:?} in {path}")]
    BadMagic { found: [u8; 4], path: PathBuf },

    #[error("unsupported matrix file version {0}")]
    UnsupportedVersion(u32),

    #[error("truncated payload in {path}: expected {expected} bytes")]
    TruncatedPayload { expected: u64, path: PathBuf },

    #[error("non-finite value at ({row}, {col})")]
    NonFiniteValue { row: usize, col: usize },

    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),

    #[error("missing file: {0}")]
    MissingFile(PathBuf),

    #[error("voxel {voxel}: {source}")]
    Voxel {
        voxel: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad inputs or configuration rather than by
    /// a failure while computing.
    pub fn is_data_error(&self) -> bool {
        !matches!(self, Error::Io { .. })
    }
}
