//! Shallow fusion: beam search over `log p(y|x) + λ·log p_LM(y)` scored one
//! token at a time.

mod beam;
mod lattice;
mod source;

pub use beam::{
    beam_search_fusion, exhaustive_oracle, format_decode_line, fuse, FusionConfig, Hypothesis, ORACLE_LIMIT,
};
pub use lattice::Lattice;
pub use source::{PosteriorSource, LOG_FLOOR};
