use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the solver and its I/O layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value from {callback} at {input}")]
    NonFinite { callback: String, input: String },

    #[error("non-finite state at step {step}, particle {particle} ({coefficient})")]
    NonFiniteState {
        step: usize,
        particle: usize,
        coefficient: &'static str,
    },

    #[error("negative stencil weight {weight:e} at node {node} (diffusion is not diagonally dominant)")]
    NegativeStencil { node: usize, weight: f64 },

    #[error("linear solve stalled at residual {residual:e} after {sweeps} sweeps")]
    SolveFailed { residual: f64, sweeps: usize },

    #[error("control {value} outside box [{lo}, {hi}] at step {step}, particle {particle}")]
    BoxViolation {
        step: usize,
        particle: usize,
        value: f64,
        lo: f64,
        hi: f64,
    },

    #[error("Riccati solution blew up at t = {time}")]
    RiccatiBlowUp { time: f64 },

    #[error("config line {line}: {message}")]
    Config { line: usize, message: String },

    #[error("unknown config key `{key}` (did you mean `{suggestion}`?)")]
    UnknownKey { key: String, suggestion: String },

    #[error("malformed grid CSV: {0}")]
    Csv(String),

    #[error("iteration {iteration}: {source}")]
    Iteration {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
