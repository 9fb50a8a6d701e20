use std::path::PathBuf;

use thiserror::Error;

use crate::tensor::DType;

pub type Result<T, E = UcpError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum UcpError {
    #[error("io failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("corrupt tensor header: {0}")]
    CorruptHeader(String),

    #[error("truncated tensor payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: u64, found: u64 },

    #[error("tensor payload has {extra} trailing bytes")]
    TrailingBytes { extra: u64 },

    #[error("unsupported cast {from:?} -> {to:?}")]
    UnsupportedCast { from: DType, to: DType },

    #[error("index out of bounds: {0}")]
    Bounds(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("dtype mismatch: {0}")]
    DTypeMismatch(String),

    #[error("invalid model spec: {0}")]
    InvalidSpec(String),

    #[error("incompatible parallel config: {0}")]
    IncompatibleConfig(String),

    #[error("no pattern rule for param `{param}`: {reason}")]
    UnsupportedPattern { param: String, reason: String },

    #[error("manifest error in {path}: {reason}")]
    Manifest { path: PathBuf, reason: String },

    #[error("missing fragment for `{param}`/{kind}: {detail}")]
    MissingFragment {
        param: String,
        kind: String,
        detail: String,
    },

    #[error("overlapping fragments for `{param}`/{kind}: {detail}")]
    OverlappingFragment {
        param: String,
        kind: String,
        detail: String,
    },

    #[error("replica mismatch for `{param}`/{kind}: {detail}")]
    ReplicaMismatch {
        param: String,
        kind: String,
        detail: String,
    },

    #[error("nonzero padding: {0}")]
    NonzeroPadding(String),

    #[error("output directory {0} is not empty")]
    NonEmptyOutDir(PathBuf),

    #[error("json error in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("rank {rank}: {source}")]
    InRank {
        rank: String,
        #[source]
        source: Box<UcpError>,
    },

    #[error("param `{param}`: {source}")]
    InParam {
        param: String,
        #[source]
        source: Box<UcpError>,
    },
}

impl UcpError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        UcpError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        UcpError::Json {
            path: path.into(),
            source,
        }
    }

    pub fn in_rank(self, rank: impl Into<String>) -> Self {
        UcpError::InRank {
            rank: rank.into(),
            source: Box::new(self),
        }
    }

    pub fn in_param(self, param: impl Into<String>) -> Self {
        UcpError::InParam {
            param: param.into(),
            source: Box::new(self),
        }
    }

    /// Strips provenance wrappers.
    pub fn root(&self) -> &UcpError {
        match self {
            UcpError::InRank { source, .. } | UcpError::InParam { source, .. } => source.root(),
            other => other,
        }
    }
}
