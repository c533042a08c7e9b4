//! Core laboratory for dynamic prompt scheduling on a micro transformer.
//!
//! Everything numeric lives here: a tape-based reverse-mode autodiff engine
//! over flat `f64` tensors, softmax scheduling over a shared prompt pool,
//! gated fusion of composed prompts with task embeddings, synthetic
//! multi-task benchmarks, and a gradient-normalized multi-task trainer.
//!
//! The crate is `no_std` (with `alloc`) so the numerics stay portable and
//! free of accidental platform dependencies; all IO, CLI and file formats
//! live in the companion binary crate.

#![no_std]
#![deny(unsafe_code)]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod math;
pub mod model;
pub mod optim;
pub mod params;
pub mod rng;
pub mod scheduler;
pub mod tape;
pub mod tasks;
pub mod tensor;
pub mod trainer;
pub mod weights;

pub use error::CoreError;
