use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid feature map shape {height}x{width}x{channels} with {len} values")]
    InvalidShape {
        height: usize,
        width: usize,
        channels: usize,
        len: usize,
    },
    #[error("non-finite value at index {0}")]
    NonFiniteValue(usize),
    #[error("vector norm is zero")]
    ZeroVector,
    #[error("patch {0} has zero norm")]
    ZeroPatch(usize),
    #[error("patch set is empty")]
    EmptyPatchSet,
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("descriptor store is empty")]
    EmptyStore,
    #[error("query descriptor is not normalized")]
    UnnormalizedQuery,
    #[error("row {row} has norm {norm}, expected unit norm")]
    NonUnitRow { row: usize, norm: f64 },

    #[error("bad magic in {what}: expected {expected:?}, found {found:?}")]
    BadMagic {
        what: &'static str,
        expected: [u8; 4],
        found: [u8; 4],
    },
    #[error("unsupported {what} version {version}")]
    UnsupportedVersion { what: &'static str, version: u16 },
    #[error("truncated {what}: {detail}")]
    TruncatedFile { what: &'static str, detail: String },
    #[error("malformed {what}: {detail}")]
    Malformed { what: &'static str, detail: String },
    #[error("checksum mismatch for {path}: expected {expected}, computed {actual}")]
    ChecksumMismatch {
        path: PathBuf,
        expected: String,
        actual: String,
    },

    #[error("duplicate id {0:?} in manifest")]
    DuplicateId(String),
    #[error("line {0}: split must be one of index, query, train")]
    BadSplit(usize),
    #[error("line {0}: expected 5 tab-separated fields")]
    MalformedLine(usize),

    #[error("no feature map for document {0:?}")]
    MissingFeatureMap(String),
    #[error("document {id:?}: {source}")]
    Document {
        id: String,
        #[source]
        source: Box<Error>,
    },

    #[error("need at least {needed} classes with {per_class} entries each, found {found}")]
    InsufficientClasses {
        needed: usize,
        per_class: usize,
        found: usize,
    },
    #[error("non-finite loss at step {0}")]
    NonFiniteLoss(usize),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("training samples all carry the same label")]
    DegenerateLabels,

    #[error("relevant set is empty")]
    EmptyRelevantSet,
    #[error("query set is empty")]
    EmptyQuerySet,
    #[error("unknown query {0:?}")]
    UnknownQuery(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn for_document(self, id: &str) -> Self {
        match self {
            e @ Error::Document { .. } => e,
            e => Error::Document {
                id: id.to_string(),
                source: Box::new(e),
            },
        }
    }

    /// The error with any [`Error::Document`] wrappers removed.
    pub fn root(&self) -> &Error {
        match self {
            Error::Document { source, .. } => source.root(),
            e => e,
        }
    }
}
