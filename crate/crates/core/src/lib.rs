//! Structured pruning of small transformers with variational information
//! bottleneck gates.
//!
//! The crate is `no_std` (it needs `alloc`). File formats, configuration
//! and the command-line driver live in the `vibprune` companion crate.

#![no_std]

extern crate alloc;

pub mod analysis;
pub mod data;
pub mod error;
pub mod extract;
pub mod gates;
pub mod model;
pub mod objective;
pub mod pipeline;
pub mod tensor;

pub use error::{Error, Result};

/// Deterministic generator used for every random draw in the crate.
pub type Rng = rand_chacha::ChaCha8Rng;
