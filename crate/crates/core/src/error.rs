use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("invalid shape {0:?}")]
    InvalidShape(Vec<usize>),
    #[error("{what} index {index} out of range (bound {bound})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("loss has no unmasked positions")]
    EmptyLoss,
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
}

/// Checkpoint decoding failures. Each variant maps to a distinct [`CheckpointError::code`].
#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic bytes")]
    BadMagic,
    #[error("format version {found} not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("truncated checkpoint: {0}")]
    Truncated(String),
    #[error("parameter {0} overlaps the previous payload range")]
    Overlap(String),
    #[error("parameter {0} leaves a gap in the payload")]
    Gap(String),
    #[error("shape conflict for {name}: manifest {manifest:?}, config expects {expected:?}")]
    ShapeConflict {
        name: String,
        manifest: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("header: {0}")]
    Header(String),
    #[error("manifest does not match config: {0}")]
    Inconsistent(String),
}

impl CheckpointError {
    pub fn code(&self) -> u32 {
        match self {
            CheckpointError::Io(_) => 1,
            CheckpointError::BadMagic => 2,
            CheckpointError::VersionMismatch { .. } => 3,
            CheckpointError::Truncated(_) => 4,
            CheckpointError::Overlap(_) => 5,
            CheckpointError::Gap(_) => 6,
            CheckpointError::ShapeConflict { .. } => 7,
            CheckpointError::Header(_) => 8,
            CheckpointError::Inconsistent(_) => 9,
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("freeze pattern `{0}` matches no parameter")]
    PatternUnmatched(String),
    #[error("incompatible models: {0}")]
    Incompatible(String),
    #[error("duplicate domain `{0}`")]
    DuplicateDomain(String),
    #[error("unknown domain `{0}`")]
    UnknownDomain(String),
    #[error("empty input: {0}")]
    Empty(String),
    #[error("verifier failed on prompt {prompt_id}: {reason}")]
    Verifier { prompt_id: String, reason: String },
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("missing artifact {path}; run `{hint}` first")]
    MissingArtifact { path: String, hint: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
