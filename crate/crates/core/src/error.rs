use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed record at line {line}: {message}")]
    MalformedRecord { line: usize, message: String },

    #[error("duplicate record id {0}")]
    DuplicateId(u64),

    #[error("malformed header: {0}")]
    MalformedHeader(String),

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: u64, found: u64 },

    #[error("non-finite value at row {row}, column {col}")]
    NonFiniteValue { row: usize, col: usize },

    #[error("caption count {captions} does not match embedding count {embeddings}")]
    CountMismatch { captions: usize, embeddings: usize },

    #[error("row {row} has zero norm")]
    ZeroVector { row: usize },

    #[error("class indices are not contiguous: expected {expected}, found {found}")]
    NonContiguousIndices { expected: usize, found: usize },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("query tokenizes to zero tokens: {0:?}")]
    EmptyQuery(String),

    #[error("record {0} has no embedding in the corpus")]
    MissingEmbedding(u64),

    #[error("pool stage {found} not accepted here (expected {expected})")]
    StageMismatch { expected: String, found: String },

    #[error("pool is empty")]
    EmptyPool,

    #[error("cluster is empty")]
    EmptyCluster,

    #[error("centroid{} is degenerate (near-zero mean)", class.map(|c| format!(" of class {c}")).unwrap_or_default())]
    DegenerateCentroid { class: Option<usize> },

    #[error("unknown class index {class} (n_classes = {n_classes})")]
    UnknownClass { class: usize, n_classes: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("label {label} out of range at sample {sample} (n_classes = {n_classes})")]
    LabelOutOfRange {
        sample: usize,
        label: usize,
        n_classes: usize,
    },

    #[error("test set is empty")]
    EmptyTestSet,

    #[error("class {class} has {available} training examples, {requested} shots requested")]
    InsufficientShots {
        class: usize,
        available: usize,
        requested: usize,
    },

    #[error("invalid config: {0}")]
    InvalidConfig(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable machine-readable name of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "Io",
            Error::MalformedRecord { .. } => "MalformedRecord",
            Error::DuplicateId(_) => "DuplicateId",
            Error::MalformedHeader(_) => "MalformedHeader",
            Error::TruncatedPayload { .. } => "TruncatedPayload",
            Error::NonFiniteValue { .. } => "NonFiniteValue",
            Error::CountMismatch { .. } => "CountMismatch",
            Error::ZeroVector { .. } => "ZeroVector",
            Error::NonContiguousIndices { .. } => "NonContiguousIndices",
            Error::DimensionMismatch { .. } => "DimensionMismatch",
            Error::EmptyQuery(_) => "EmptyQuery",
            Error::MissingEmbedding(_) => "MissingEmbedding",
            Error::StageMismatch { .. } => "StageMismatch",
            Error::EmptyPool => "EmptyPool",
            Error::EmptyCluster => "EmptyCluster",
            Error::DegenerateCentroid { .. } => "DegenerateCentroid",
            Error::UnknownClass { .. } => "UnknownClass",
            Error::ShapeMismatch(_) => "ShapeMismatch",
            Error::LabelOutOfRange { .. } => "LabelOutOfRange",
            Error::EmptyTestSet => "EmptyTestSet",
            Error::InsufficientShots { .. } => "InsufficientShots",
            Error::InvalidConfig(_) => "InvalidConfig",
        }
    }
}
