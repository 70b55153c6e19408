//! Core numerics for ECGA text classifiers: an ensemble of learners, each a
//! k-gram convolution feeding a bidirectional GRU, additive attention pooling
//! and a softmax head, with the learners' probabilities averaged.
//!
//! The crate is `no_std` (it needs `alloc`). Everything that touches files,
//! the command line or the clock lives in the `ecga` companion crate.
//!
//! Module map:
//!
//! - [`tensor`] and [`tape`]: dense `f64` tensors and a reverse-mode
//!   gradient tape over a handful of primitives.
//! - [`layers`]: embedding lookup, convolution, BiGRU, attention, head.
//! - [`ensemble`]: building, querying and scoring the averaged ensemble.
//! - [`text`]: cleaning, tokenization, vocabulary, padding, embedding tables.
//! - [`train`], [`cv`], [`metrics`]: Adam, the epoch loop, k-fold splits and
//!   evaluation reports.
//! - [`gradcheck`]: finite-difference comparison against the tape.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod cv;
pub mod ensemble;
mod error;
pub mod gradcheck;
pub mod layers;
pub mod metrics;
pub mod tape;
pub mod tensor;
pub mod text;
pub mod train;

pub use error::{Error, Result};
pub use tape::{Gradients, Mode, Tape, Var};
pub use tensor::Tensor;

/// The seedable generator used everywhere randomness is needed.
pub type SeededRng = rand_chacha::ChaCha8Rng;

/// Builds the crate's standard generator from a 64-bit seed.
pub fn seeded_rng(seed: u64) -> SeededRng {
    use rand::SeedableRng;
    SeededRng::seed_from_u64(seed)
}
