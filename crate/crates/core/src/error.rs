use std::path::PathBuf;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("insufficient frames: need at least {need}, got {got}")]
    InsufficientFrames { need: usize, got: usize },

    #[error("frame misalignment: {0}")]
    FrameMisalignment(String),

    #[error("non-finite data in {0}")]
    NonFinite(String),

    #[error("overlap too large: dropping {overlap} frames from a {frames}-frame clip")]
    OverlapTooLarge { overlap: usize, frames: usize },

    #[error("part dimension mismatch: expected {expected} columns, got {got}")]
    PartDimMismatch { expected: usize, got: usize },

    #[error("unresolved index {index} (codebook size {vocab})")]
    UnresolvedIndex { index: u32, vocab: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("speaker id {id} out of range (identity set size {n_ids})")]
    IdOutOfRange { id: u32, n_ids: usize },

    #[error("degenerate covariance: eigenvalue {0:e}")]
    DegenerateCovariance(f64),

    #[error("no reference beats")]
    NoReferenceBeats,

    #[error("not a container")]
    NotAContainer,

    #[error("corrupt container: {0}")]
    CorruptContainer(String),

    #[error("incomplete clip {path}: missing entry '{entry}'")]
    IncompleteClip { path: PathBuf, entry: String },

    #[error("stage order violation: {0}")]
    StageOrderViolation(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("missing input: {}", .0.display())]
    MissingInput(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

impl Error {
    /// True for errors caused by absent files or directories, as opposed to bad content.
    pub fn is_missing_input(&self) -> bool {
        match self {
            Error::MissingInput(_) => true,
            Error::Io(e) => e.kind() == std::io::ErrorKind::NotFound,
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
