use std::path::{Path, PathBuf};

use qfm_tensor::{CheckpointError, OptimError, TensorError};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error("checkpoint: {0}")]
    Container(#[from] CheckpointError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("config: {0}")]
    Config(String),
    #[error("image shape {got:?} does not match model input {expected:?}")]
    ImageShape { expected: Vec<usize>, got: Vec<usize> },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {msg}")]
    Manifest {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("image {path}: {msg}")]
    Image { path: String, msg: String },
    #[error("split: {0}")]
    Split(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("memory is empty after excluding the query")]
    EmptyMemory,
    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(&'static str),
    #[error("disjointness violated: {0}")]
    Disjointness(String),
    #[error("refusing to evaluate on training manifest {0:?} (use allow_same)")]
    SameManifest(String),
    #[error("epoch {epoch}, step {step}, sample {sample}: {source}")]
    Step {
        epoch: usize,
        step: usize,
        sample: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
