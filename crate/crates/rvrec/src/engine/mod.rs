//! Parameter storage, deterministic initialization, a minimal reverse-mode
//! tape for the fixed loss graphs, Adam, and finite-difference verification.

mod gradcheck;
mod store;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use store::{OptimConfig, ParamStore, ShapeSpec};
pub use tape::{sigmoid, softplus, Gradients, Tape, Var};
pub use tensor::{axpy, dot, Tensor};

use thiserror::Error;

#[derive(Error, Debug)]
pub enum EngineError {
    #[error("numeric fault: non-finite value in tensor {tensor}")]
    NumericFault { tensor: String },
    #[error("shape mismatch for {tensor}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        tensor: String,
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// SplitMix64-style mixer for deriving independent RNG streams from a global
/// seed plus context words (epoch, user index, purpose tag, ...).
pub fn mix_seed(seed: u64, words: &[u64]) -> u64 {
    let mut z = seed ^ 0x9e37_79b9_7f4a_7c15;
    for &w in words {
        z = z.wrapping_add(w).wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^= z >> 31;
    }
    z
}
