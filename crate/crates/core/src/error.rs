use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("duplicate vocabulary surface {0:?}")]
    DuplicateSurface(String),

    #[error("line {line}: unknown token class {label:?}")]
    UnknownClass { line: usize, label: String },

    #[error("special token block is incomplete: missing {0}")]
    MissingSpecials(String),

    #[error("name is empty")]
    EmptyName,

    #[error("special token {surface} at position {position} cannot be rendered as text")]
    SpecialToken { position: usize, surface: String },

    #[error("token id {id} out of range for vocabulary of size {size}")]
    TokenOutOfRange { id: usize, size: usize },

    #[error("vocabulary mismatch: expected {expected}, found {found}")]
    VocabMismatch { expected: String, found: String },

    #[error("non-finite property value {0}")]
    NonFinite(f64),

    #[error("invalid property cutoffs: low {low} must be below high {high}")]
    InvalidCutoffs { low: f64, high: f64 },

    #[error("unknown property {0:?} (expected one of logp, logd, psa, refractivity, proxy)")]
    UnknownProperty(String),

    #[error("invalid mask plan: {0}")]
    InvalidPlan(String),

    #[error("corpus has no usable records")]
    EmptyCorpus,

    #[error("vocabulary lacks tokens required by the synthetic generator: {0}")]
    MissingTokens(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("sequence length {len} exceeds limit {max}")]
    LengthOverflow { len: usize, max: usize },

    #[error("zero-norm query vector")]
    ZeroNorm,

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("incompatible checkpoint format version {found} (supported: {supported})")]
    CheckpointVersion { found: u32, supported: u32 },

    #[error("model is not usable for this job: {0}")]
    Incompatible(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
