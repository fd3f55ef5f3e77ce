//! Memory-editing laboratory on a from-scratch micro decoder-only transformer.
//!
//! The crate is `no_std` with `alloc`. It contains everything that is pure
//! computation: the model and its gradients, the synthetic corpus and the
//! training loop, the three editors (rank-one, batched multi-layer and the
//! codebook adapter), the sequential-editing harness and the diagnostic
//! analyses. File formats, configuration and the command line live in the
//! `memedit` companion crate.
#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod corpus;
pub mod diagnostics;
pub mod digest;
pub mod editors;
mod error;
pub mod harness;
pub mod linalg;
pub mod math;
pub mod model;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
