//! Long-context autoregressive modeling with a latent bottleneck.
//!
//! A single causally masked cross-attention maps an input sequence of up to
//! `max_context` tokens onto a small stack of latents (one per output
//! position), which a deep causal self-attention stack then processes. The
//! crate contains everything needed to train and run such models on one
//! machine:
//!
//! - [`numerics`]: dense arrays plus tape-based reverse-mode differentiation
//! - [`attention`]: masks, rotary encoding, attention blocks, key dropout
//! - [`model`]: model assembly, the decoder-only baseline, checkpoints
//! - [`training`]: loss with z-loss, Adam, schedules, synthetic tasks
//! - [`inference`]: cached/uncached sampling and strided evaluation
//! - [`bench`]: step-time and attention-memory scaling measurements

pub mod attention;
pub mod inference;
pub mod model;
pub mod numerics;
pub mod training;

use thiserror::Error;

/// Token id. Vocabularies are small enough that 32 bits always suffice.
pub type Token = u32;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("softmax row {row} has no unmasked entries")]
    DegenerateRow { row: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("non-finite gradient for parameter {name}")]
    NonFiniteGradient { name: String },
    #[error("loss became non-finite at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("gradient target is not a scalar (shape {0:?})")]
    NonScalarLoss(Vec<usize>),
    #[error("token id {id} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { id: Token, vocab: usize },
    #[error("corrupt checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub(crate) fn config(detail: impl Into<String>) -> Self {
        Error::Config(detail.into())
    }
}
