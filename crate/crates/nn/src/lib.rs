//! Minimal neural-network stack for toy-scale training: a reverse-mode
//! differentiable MLP with a few architectural variants, sinusoidal time
//! embeddings, an Adam optimizer, EMA weight tracking, and a simple
//! checkpoint format.
//!
//! Everything is CPU-only `f64` math on dense row-major matrices. The goal
//! is correctness and determinism, not throughput: every gradient is
//! checkable against finite differences and every forward pass is a pure
//! function of (params, input, rng seed).

pub mod checkpoint;
pub mod embed;
pub mod mat;
pub mod mlp;
pub mod optim;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use embed::{sinusoidal_time_embed, time_embed_rows};
pub use mat::Matrix;
pub use mlp::{
    backprop, backprop_trace, mlp_forward, mlp_forward_trace, Activation, MlpSpec, ParamSet,
    Section, Trace,
};
pub use optim::{adam_step, ema_update, AdamConfig, AdamState, EmaState};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: String,
        expected: String,
        got: String,
    },
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("format error at byte {offset}: {what}")]
    Format { offset: u64, what: String },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dim_err(context: &str, expected: impl ToString, got: impl ToString) -> Error {
    Error::Dimension {
        context: context.to_string(),
        expected: expected.to_string(),
        got: got.to_string(),
    }
}
