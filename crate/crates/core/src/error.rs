use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = BtiError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum BtiError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("tensor data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },

    #[error("gradient requested for a non-scalar output of shape {0:?}")]
    NonScalarOutput(Vec<usize>),

    #[error("variable {0} is not a differentiable node of this graph")]
    NotOnGraph(usize),

    #[error("graph replay expected {expected} inputs, got {got}")]
    InputCount { expected: usize, got: usize },

    #[error("invalid vocabulary: {0}")]
    Vocabulary(String),

    #[error("text is empty after whitespace normalization")]
    EmptyText,

    #[error("no tokens fit in a sequence of length {max_len}")]
    NothingFits { max_len: usize },

    #[error("token id {id} out of range for vocabulary of size {vocab_size}")]
    TokenOutOfRange { id: u32, vocab_size: usize },

    #[error("sequence length {len} exceeds the encoder maximum of {max_len}")]
    SequenceTooLong { len: usize, max_len: usize },

    #[error("non-finite activation in {0}")]
    NonFinite(String),

    #[error("invalid encoder config: {0}")]
    Config(String),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),

    #[error("file truncated while reading {0}")]
    Truncated(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("fingerprint mismatch: index built with {index:016x}, weights are {weights:016x}")]
    FingerprintMismatch { index: u64, weights: u64 },

    #[error("zero-norm feature vector: cosine similarity is undefined")]
    ZeroNormFeature,

    #[error("no candidate with a non-zero latent to match against")]
    NoMatchCandidates,

    #[error("no scores to cluster")]
    EmptyScores,

    #[error("non-finite score {0}")]
    NonFiniteScore(f64),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("duplicate item id {0:?}")]
    DuplicateId(String),

    #[error("unknown item id {0:?}")]
    UnknownId(String),

    #[error("corpus is empty")]
    EmptyCorpus,

    #[error("item {id:?}: {source}")]
    Item {
        id: String,
        #[source]
        source: Box<BtiError>,
    },

    #[error("unknown report format {0:?}")]
    UnknownFormat(String),

    #[error("explanation has no pairs to render")]
    EmptyExplanation,

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
