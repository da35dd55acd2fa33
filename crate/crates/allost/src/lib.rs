//! File formats, data pipeline, training loop and experiment drivers for
//! the dual-encoder speech translation model in `allost-core`.

pub mod ablate;
pub mod checkpoint;
pub mod config;
pub mod datapipe;
pub mod error;
pub mod features;
pub mod manifest;
pub mod synth;
pub mod tokenizer_file;
pub mod trainer;
pub mod translate;

pub use error::{Error, Result};
