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
    #[error("not a .flo file: bad magic tag {0}")]
    BadMagic(f32),
    #[error("truncated file: expected {expected} bytes, found {found}")]
    TruncatedFile { expected: usize, found: usize },
    #[error("sprite of size {sprite} does not fit in a {width}x{height} frame")]
    SpriteTooLarge {
        sprite: usize,
        width: usize,
        height: usize,
    },
    #[error("sequence has {len} frames, tuples need {k}")]
    SequenceTooShort { len: usize, k: usize },
    #[error("count mismatch: {0}")]
    CountMismatch(String),
    #[error("unreadable file {path}: {reason}")]
    UnreadableFile { path: PathBuf, reason: String },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("index {index} out of range for tuple of length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("network arch mismatch: expected {expected}, found {found}")]
    ArchMismatch { expected: String, found: String },
    #[error("non-first teacher frame requires a flow field, warped previous frame and mask")]
    MissingFlow,
    #[error("non-finite values in {0}")]
    NonFinite(String),
    #[error("unknown feature layer {0:?}")]
    UnknownLayer(String),
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    VersionMismatch { expected: u32, found: u32 },
    #[error("corrupt checkpoint: {0}")]
    CorruptFile(String),
    #[error("rank matrices differ in geometry: {0}")]
    GeometryMismatch(String),
    #[error("frame count mismatch: {0}")]
    LengthMismatch(String),
    #[error("missing checkpoint {0}")]
    MissingCheckpoint(PathBuf),
    #[error("loss diverged at iteration {iter}: {detail}")]
    DivergedLoss { iter: usize, detail: String },
    #[error("teacher cache has no entry for {0}")]
    CacheMiss(String),
    #[error("teacher cache corrupt: {0}")]
    CacheCorrupt(String),
    #[error("frozen network {0} cannot be updated")]
    Frozen(String),
    #[error("invalid config key {key}: {reason}")]
    ConfigInvalid { key: String, reason: String },
    #[error("image error on {path}: {reason}")]
    Image { path: PathBuf, reason: String },
    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }
}
