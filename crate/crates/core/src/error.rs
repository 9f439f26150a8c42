use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },

    #[error("{op}: {msg}")]
    Geometry { op: &'static str, msg: String },

    #[error("numeric failure in {what}: {msg}")]
    Numeric { what: String, msg: String },

    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },

    #[error("batch statistics need at least 2 values per channel, got {count}")]
    Statistics { count: usize },

    #[error("invalid synthetic spec: {0}")]
    Spec(String),

    #[error("split error: {0}")]
    Split(String),

    #[error("format error at byte {offset}: {msg}")]
    Format { offset: usize, msg: String },

    #[error("evaluation over an empty set")]
    EmptyEvaluation,

    #[error("unlabeled records in {0}")]
    Unlabeled(String),

    #[error("incompatible {what}: {msg}")]
    Compatibility { what: &'static str, msg: String },

    #[error("configuration errors:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn geometry(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Geometry {
            op,
            msg: msg.into(),
        }
    }

    pub(crate) fn numeric(what: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Numeric {
            what: what.into(),
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
