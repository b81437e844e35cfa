use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("sequence length {len} exceeds max_positions {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("homophone group mentions unknown symbol {0:?}")]
    UnknownSymbol(String),

    #[error("invalid vocabulary: {0}")]
    Vocabulary(String),

    #[error("invalid alignment: {0}")]
    Alignment(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}:{line}: {msg}")]
    Data { path: PathBuf, line: usize, msg: String },

    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: PathBuf, msg: String },

    #[error("{stage} needs the {needed} checkpoint at {path}; run {needed} first or train from scratch")]
    MissingCheckpoint {
        stage: String,
        needed: String,
        path: PathBuf,
    },

    #[error("training diverged in {stage} at epoch {epoch}, step {step}: loss {loss}")]
    Divergence {
        stage: String,
        epoch: usize,
        step: usize,
        loss: f64,
    },

    #[error("empty reference corpus")]
    EmptyReference,

    #[error("{0}")]
    Decode(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
