use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: {msg}")]
    InvalidShape { op: &'static str, msg: String },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("graph error: {0}")]
    Graph(String),

    #[error(
        "fixed-point inversion did not converge: residual {residual:e} after {iters} iterations"
    )]
    NonConvergence { residual: f64, iters: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("unknown attention variant `{0}`")]
    UnknownVariant(String),

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Divergence { epoch: usize, loss: f64 },

    #[error("SNR is ill-defined for an all-zero code")]
    ZeroSignalPower,

    #[error("NMSE is undefined for an all-zero reference")]
    ZeroReference,

    #[error("format error: {0}")]
    Format(String),

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}
