//! Toy multimodal decoder-only transformer with dynamic vision-language
//! context sparsification.
//!
//! The crate is `no_std` (it needs `alloc`) and contains only pure
//! computation: dense kernels, the decoder, the keep/drop predictors, the
//! sparsified inference modes, the end-to-end sparsification trainer and the
//! FLOPs/KV-memory cost ledger. File formats, configuration and the CLI live
//! in the `sparsevl` companion crate.
#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod autodiff;
pub mod cost;
pub mod error;
pub mod kernels;
pub mod model;
pub mod predictor;
pub mod rng;
pub mod sparse;
pub mod train;

pub use error::{Error, Result};
pub use kernels::{MaskMatrix, Matrix};
