use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid recipe: {0}")]
    InvalidRecipe(String),
    #[error("insufficient audio: need {needed} samples, got {got}")]
    InsufficientAudio { needed: usize, got: usize },
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid noise schedule: {0}")]
    ScheduleConfig(String),
    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: String, got: String },
    #[error("step order: t_prev ({t_prev}) must be below t ({t})")]
    StepOrder { t: usize, t_prev: usize },
    #[error("invalid weight {0}: confidence must lie in [0, 1]")]
    InvalidWeight(f64),
    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Divergence { epoch: usize, loss: f64 },
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("cardinality: expected {min}..={max} items, got {got}")]
    Cardinality { min: usize, max: usize, got: usize },
    #[error("not ready: {0}")]
    NotReady(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("integrity violation: {0}")]
    Integrity(String),
    #[error("integrity violation: user {user} already rated song {song_id}")]
    DuplicateRating { song_id: u64, user: String },
    #[error("session {0} has expired")]
    Expired(String),
    #[error("validation: {0}")]
    Validation(String),
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },
    #[error("incompatible checkpoint: {0}")]
    IncompatibleCheckpoint(String),
    #[error("storage error at {path}: {source}")]
    Storage {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("audio codec: {0}")]
    Audio(String),
}

impl Error {
    pub(crate) fn storage(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Storage {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(expected: impl ToString, got: impl ToString) -> Self {
        Error::Shape {
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }
}
