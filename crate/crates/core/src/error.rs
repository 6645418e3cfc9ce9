use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the framework.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("size error: element count of {0:?} overflows usize")]
    Size(Vec<usize>),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("degenerate batch: batch norm in train mode needs at least 2 samples, got {0}")]
    DegenerateBatch(usize),

    #[error("non-finite value produced by `{op}` at element {index}")]
    NonFinite { op: &'static str, index: usize },

    #[error("rejected configuration '{config}' for {base}: the all-substituted CIFAR configuration is not trainable")]
    RejectedConfig { base: String, config: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("checkpoint checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("non-finite gradient in parameter `{param}` at step {step}")]
    NonFiniteGradient { param: String, step: usize },

    #[error("training diverged at epoch {epoch}: train loss {loss} exceeded 10x the initial loss {initial} for 3 consecutive epochs")]
    Diverged { epoch: usize, loss: f64, initial: f64 },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
