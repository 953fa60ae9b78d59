use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("zero-length vector where a direction is required")]
    ZeroNorm,
    #[error("direction is not unit norm (|v| = {0})")]
    NotUnit(f64),
    #[error("value out of range: {0}")]
    Range(String),
    #[error("duplicate event at frame {frame}, track {track}")]
    DuplicateEvent { frame: usize, track: usize },
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("backward requested before any forward pass was recorded")]
    NoForward,
    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("training diverged at step {step}; last good checkpoint at {checkpoint}")]
    Diverged { step: usize, checkpoint: PathBuf },
    #[error("could not place events without violating constraints after {0} attempts")]
    Infeasible(usize),
    #[error("corrupt tensor file {path}: {msg}")]
    CorruptTensor { path: PathBuf, msg: String },
    #[error("checksum mismatch for {0}")]
    Checksum(PathBuf),
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Wav(#[from] hound::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
