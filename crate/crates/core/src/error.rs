use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("vector has zero norm")]
    ZeroNorm,
    #[error("vector contains a non-finite entry")]
    NonFinite,
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("embedding store is empty")]
    EmptyStore,
    #[error("invalid embedding store: {0}")]
    InvalidStore(String),

    // store file format
    #[error("bad magic bytes (expected \"EMBS\")")]
    BadMagic,
    #[error("unsupported store version {0}")]
    VersionUnsupported(u8),
    #[error("store file is truncated")]
    TruncatedFile,
    #[error("store file has {0} trailing bytes")]
    TrailingBytes(usize),
    #[error("duplicate id {0:?}")]
    DuplicateId(String),

    #[error("prompt dictionary is empty")]
    EmptyDictionary,
    #[error("invalid prompt record {id:?}: {reason}")]
    InvalidPrompt { id: String, reason: String },

    #[error("text expansion provider unavailable: {0}")]
    ProviderUnavailable(String),
    #[error("malformed provider response: {0}")]
    MalformedResponse(String),
    #[error("text store is empty")]
    EmptyTextStore,
    #[error("image store is empty")]
    EmptyImageStore,
    #[error("no embedding for bag text {0:?}")]
    MissingTextEmbedding(String),
    #[error("no embedding for item {0:?}")]
    MissingItem(String),
    #[error("bag for image {0:?} is empty")]
    EmptyBag(String),

    #[error("encoder output is degenerate (pre-normalization norm below 1e-30)")]
    DegenerateOutput,
    #[error("loss became non-finite at step {step}")]
    DivergedLoss { step: usize },
    #[error("training corpus is empty")]
    EmptyCorpus,

    #[error("class {0:?} has no prompts")]
    EmptyPromptSet(String),
    #[error("slide has no tissue tiles")]
    NoTissueTiles,

    #[error("class {0} has no samples in y_true")]
    MissingClass(usize),
    #[error("only one class present")]
    SingleClass,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("cannot sample {classes} centers with pairwise cosine <= {max_cosine} in {dim} dims")]
    InfeasibleSeparation { classes: usize, dim: usize, max_cosine: f64 },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json { path: path.into(), source }
    }

    /// True for errors caused by bad inputs rather than failures while running.
    pub fn is_validation(&self) -> bool {
        !matches!(
            self,
            Error::Io { .. } | Error::DivergedLoss { .. } | Error::ProviderUnavailable(_)
        )
    }
}
