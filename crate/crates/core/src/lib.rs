//! Grouped int8 (Q8_0) Llama 2 inference, structured the way an HLS kernel
//! would compute it, together with a table-driven FPGA cycle model and an
//! energy-per-token accountant.
//!
//! The host side (tokenizer, sampler, perplexity loop) drives
//! [`model::Transformer::forward`], which performs exactly one token at one
//! position against a statically sized [`model::RunState`].

pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod model;
pub mod perf;
pub mod quant;
pub mod sampler;
pub mod tokenizer;

pub use error::{Error, Result};
pub use model::{ModelConfig, RunState, Transformer, TransformerWeights};
pub use quant::{QuantStats, QuantizedTensor};
