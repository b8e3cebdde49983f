use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown architecture `{0}`")]
    UnknownArch(String),

    #[error("weight entry `{name}`: expected shape {expected:?}, got {got:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("weight source has no entry `{0}`")]
    MissingEntry(String),

    #[error("kernel size must be an odd positive integer, got {0}")]
    EvenKernelSize(usize),

    #[error("layer index {0} is not a conv layer")]
    NotAConvLayer(usize),

    #[error("channel mismatch: expected {expected}, got {got}")]
    ChannelMismatch { expected: usize, got: usize },

    #[error("empty batch")]
    EmptyBatch,

    #[error("batch reduction axis has fewer than 2 elements; variance undefined")]
    DegenerateBatch,

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("snapshot does not match graph: {0}")]
    SnapshotMismatch(String),

    #[error("bank is empty")]
    EmptyBank,

    #[error("camera `{camera}` already registered to domain {domain}")]
    CameraCollision { camera: String, domain: u32 },

    #[error("domain ordinal {0} not present in bank")]
    UnknownDomain(u32),

    #[error("duplicate domain id `{0}` in bank")]
    DuplicateDomain(String),

    #[error("bad magic: expected {expected:?}")]
    BadMagic { expected: [u8; 4] },

    #[error("unsupported container version {0}")]
    UnsupportedVersion(u32),

    #[error("container truncated while reading {0}")]
    Truncated(&'static str),

    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },

    #[error("malformed container field {0}")]
    MalformedContainer(&'static str),

    #[error("dataset directory `{0}` is missing the `{1}` split")]
    MissingSplit(PathBuf, &'static str),

    #[error("no parseable images under `{0}`")]
    NoImages(PathBuf),

    #[error("train and test identity sets overlap in `{0}` (shared identity {1})")]
    SplitOverlap(String, u32),

    #[error("label {label} out of range [1, {n_id}]")]
    LabelOutOfRange { label: u32, n_id: usize },

    #[error("dataset `{0}` has an empty train split")]
    EmptyTrainSet(String),

    #[error("loss became non-finite at epoch {epoch}, batch {batch} (loss {loss})")]
    NonFiniteLoss { epoch: u32, batch: usize, loss: f64 },

    #[error("zero-norm feature vector at row {0}; cosine distance undefined")]
    ZeroNormVector(usize),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("unknown sequence order `{0}`")]
    UnknownOrder(String),

    #[error("logit shape mismatch: teacher {teacher:?}, student {student:?}")]
    LogitShapeMismatch {
        teacher: (usize, usize),
        student: (usize, usize),
    },

    #[error("class {0} has no images to compute a center from")]
    EmptyClass(u32),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("io error on `{path}`: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("{0}")]
    Other(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
