use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("file not found: {0}")]
    MissingFile(PathBuf),

    #[error("malformed header in {path}: {reason}")]
    MalformedHeader { path: PathBuf, reason: String },

    #[error("shape mismatch in {path}: header implies {expected} bytes, payload has {found}")]
    ShapeMismatch {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("embedding map must have 3 channels, found {0}")]
    InvalidChannels(usize),

    #[error("invalid phantom spec: {0}")]
    InvalidSpec(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("volume too small: need at least {min:?} voxels per axis, got {got:?}")]
    VolumeTooSmall { min: [usize; 3], got: [usize; 3] },

    #[error("patch too small: every axis needs at least {min} voxels, got {got:?}")]
    PatchTooSmall { min: usize, got: [usize; 3] },

    #[error("could not place patches with overlap fraction >= {required} (best {best:.3})")]
    OverlapUnsatisfiable { required: f64, best: f64 },

    #[error("overlap region holds {capacity} voxels, cannot host {requested} distinct pairs")]
    OverlapTooSmall { capacity: usize, requested: usize },

    #[error("empty mask")]
    EmptyMask,

    #[error("point {0:?} mm lies outside the map footprint")]
    OutOfBounds([f64; 3]),

    #[error("shape mismatch: {0}")]
    DimensionMismatch(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite loss at step {step} (run seed {seed}, batch seed {batch_seed})")]
    NonFiniteLoss { step: u64, seed: u64, batch_seed: u64 },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path)
        } else {
            Error::Io { path, source }
        }
    }
}
