use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum LhcError {
    #[error("shape mismatch: expected {expected:?}, found {found:?}")]
    Shape {
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("topology constraint ({c_gi}, {c_go}) does not tile channels ({c_i}, {c_o})")]
    Constraint {
        c_gi: usize,
        c_go: usize,
        c_i: usize,
        c_o: usize,
    },

    #[error("forward cache is stale (layer generation {layer}, cache generation {cache})")]
    StaleCache { layer: u64, cache: u64 },

    #[error("parse error at byte {offset}: {msg}")]
    Parse { offset: usize, msg: String },

    #[error("config error on line {line}: {msg}")]
    Config { line: usize, msg: String },

    #[error("corrupt packing: {0}")]
    Packing(String),

    #[error("numeric divergence at epoch {epoch}: {what}")]
    Divergence { epoch: usize, what: String },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, LhcError>;

impl LhcError {
    pub(crate) fn shape(expected: &[usize], found: &[usize]) -> Self {
        LhcError::Shape {
            expected: expected.to_vec(),
            found: found.to_vec(),
        }
    }

    pub(crate) fn parse(offset: usize, msg: impl Into<String>) -> Self {
        LhcError::Parse {
            offset,
            msg: msg.into(),
        }
    }
}
