use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },

    #[error("projection onto a zero-norm direction")]
    DegenerateDirection,

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("curve parameter t = {0} outside [0, 1]")]
    OutOfRange(f64),

    #[error("empty batch")]
    EmptyBatch,

    #[error("batch index {index} out of bounds for {len} samples")]
    BatchIndex { index: usize, len: usize },

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("local training diverged at epoch {epoch}")]
    TrainingDiverged { epoch: usize },

    #[error("global model diverged at version {version}")]
    Diverged { version: u64 },

    #[error("origin version {origin} is no longer in the model history")]
    HistoryEvicted { origin: u64 },

    #[error("config error: {0}")]
    Config(String),

    #[error("csv error at line {line}: {msg}")]
    Csv { line: u64, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
