//! Allocation-only core of the allost speech-translation toolkit.
//!
//! Everything in this crate is pure computation over in-memory values:
//! a small reverse-mode autodiff tape ([`graph`]), phone/text byte pair
//! encoding with dropout ([`bpe`]), the dual-encoder translation network
//! ([`model`]), optimizer arithmetic ([`optim`]) and multi-reference BLEU
//! ([`bleu`]). File formats, data loading and the training driver live in
//! the `allost` companion crate.
#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod bleu;
pub mod bpe;
pub mod error;
pub mod gradcheck;
pub mod graph;
mod kernels;
pub mod model;
pub mod optim;
pub mod scalar;
pub mod tensor;
pub mod text;

pub use error::TensorError;
pub use graph::{Gradients, Graph, Var};
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;
