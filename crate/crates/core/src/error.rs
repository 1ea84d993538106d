use std::path::PathBuf;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid shape {shape:?} for {len} elements")]
    BadShape { shape: Vec<usize>, len: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("timestep {t} outside schedule range 1..={t_max}")]
    TimestepRange { t: usize, t_max: usize },

    #[error("memory bank has no entry for timestep {0}")]
    MissingBankEntry(usize),

    #[error("memory bank has no reference entry for timestep {0}")]
    MissingBankRef(usize),

    #[error("gradient tape error: {0}")]
    Tape(String),

    #[error("training diverged at step {step}: {what}")]
    Training { step: usize, what: String },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("edit spec error: {0}")]
    EditSpec(String),

    #[error("sampling failed at timestep {t}: {source}")]
    AtTimestep {
        t: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad file format: {0}")]
    Format(String),
}

impl Error {
    pub fn at_timestep(self, t: usize) -> Error {
        Error::AtTimestep {
            t,
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
