//! Multilingual shallow fusion with a sparse mixture-of-experts language model.
//!
//! The crate covers the whole desk-scale pipeline: a pooled subword
//! [`tokenizer`], a decoder-only LM whose alternate feed-forward blocks are
//! top-k routed expert banks ([`model`]), Adafactor training with sentence
//! packing ([`train`]), beam search that adds `λ · log p_LM` to the recognizer
//! score at every step ([`fusion`]), and WER reporting ([`eval`]).

pub mod error;
pub mod eval;
pub mod fusion;
pub mod math;
pub mod model;
pub mod synth;
pub mod tokenizer;
pub mod train;

pub use error::{Error, Result};
pub use math::Tensor;
pub use model::{Checkpoint, MoeLm, MoeLmConfig};
pub use tokenizer::{TokenSeq, Vocab};
