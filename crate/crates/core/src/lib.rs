//! Stream learning with compositional replay: feature maps from a frozen
//! extractor are rebuilt from a trainable codebook of memory blocks, and only
//! the selected block indices are stored for replay.

pub mod codebook;
pub mod config;
pub mod error;
pub mod eval;
pub mod nn;
pub mod pipeline;
pub mod replay;
pub mod stream;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
