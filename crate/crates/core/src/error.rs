use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("Björck iteration diverged after {} iterations (residuals {residuals:?})", residuals.len())]
    Convergence { residuals: Vec<f64> },

    #[error("layer {layer}: {source}")]
    Layer {
        layer: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("invalid parametrization: {0}")]
    Parametrization(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("state error: {0}")]
    State(String),

    #[error("operator shape mismatch: feedback maps to {produced:?}, network input is {expected:?}")]
    OperatorShape {
        produced: Vec<usize>,
        expected: Vec<usize>,
    },

    #[error("refusing to materialize: operator needs {required} input coordinates, limit is {limit}")]
    SizeGuard { required: usize, limit: usize },

    #[error(transparent)]
    Data(#[from] DataError),

    #[error("config error: {0}")]
    Config(String),

    #[error("training diverged at epoch {epoch}, step {step} (loss {loss}); last good checkpoint: {}", checkpoint.as_ref().map(|p| p.display().to_string()).unwrap_or_else(|| "none".into()))]
    Divergence {
        epoch: usize,
        step: u64,
        loss: f64,
        checkpoint: Option<PathBuf>,
    },

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn dimension(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Dimension {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub fn at_layer(self, layer: usize) -> Self {
        Error::Layer {
            layer,
            source: Box::new(self),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: bad magic number 0x{found:08x}, expected 0x{expected:08x}")]
    BadMagic {
        path: PathBuf,
        expected: u32,
        found: u32,
    },

    #[error("{path}: truncated at byte offset {offset} (needed {needed} more bytes)")]
    Truncated {
        path: PathBuf,
        offset: usize,
        needed: usize,
    },

    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },

    #[error("{path}: {len} bytes is not a whole number of {record}-byte records")]
    RecordLength {
        path: PathBuf,
        len: usize,
        record: usize,
    },

    #[error("{0}")]
    Format(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Checksum { stored: u32, computed: u32 },

    #[error("precision mismatch: checkpoint holds {found:?}, network is {expected:?}")]
    Precision {
        found: crate::scalar::Precision,
        expected: crate::scalar::Precision,
    },

    #[error("shape mismatch at {what}: checkpoint has {found:?}, network has {expected:?}")]
    Shape {
        what: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },

    #[error("truncated checkpoint payload")]
    Truncated,
}
