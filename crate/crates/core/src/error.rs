use pdlab_autograd::checkpoint::CheckpointError;
use pdlab_autograd::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("config: {0}")]
    Config(String),
    #[error("empty caption")]
    EmptyCaption,
    #[error("image {height}x{width} is not divisible by patch size {patch}")]
    PatchSize {
        height: usize,
        width: usize,
        patch: usize,
    },
    #[error("sequence of length {len} exceeds capacity {capacity}")]
    SequenceTooLong { len: usize, capacity: usize },
    #[error("patch vectors have length {found}, embedding expects {expected}")]
    PatchLength { expected: usize, found: usize },
    #[error("anchor {anchor} has an empty positive set")]
    EmptyPositiveSet { anchor: usize },
    #[error("identity {id} outside classifier range [0, {classes})")]
    IdentityOutOfRange { id: usize, classes: usize },
    #[error("query {query} has no relevant gallery item")]
    NoRelevantItems { query: usize },
    #[error("unknown stage `{0}`")]
    UnknownStage(String),
    #[error("unknown strategy `{0}`")]
    UnknownStrategy(String),
    #[error("requested {requested} identities but only {available} attribute combinations exist")]
    TooManyIdentities { requested: usize, available: usize },
    #[error("empty split `{0}`")]
    EmptySplit(String),
    #[error("missing corpus at {0}")]
    MissingCorpus(String),
    #[error("freeze violation: {0}")]
    FreezeViolation(String),
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit status for the command line: checkpoint failures keep
    /// their own codes (10-16).
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Checkpoint(e) => e.code(),
            Error::Config(_) | Error::UnknownStage(_) | Error::UnknownStrategy(_) => 2,
            Error::MissingCorpus(_) => 3,
            Error::FreezeViolation(_) => 4,
            _ => 1,
        }
    }
}
