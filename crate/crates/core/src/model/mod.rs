//! Decoder-only transformer LM with sparse mixture-of-experts feed-forward
//! blocks in every other layer.

mod checkpoint;
mod config;
mod flops;
mod layers;
mod lm;
mod moe;
mod state;
mod weights;

pub use checkpoint::{Checkpoint, FORMAT_VERSION};
pub use config::MoeLmConfig;
pub use flops::{count_params_flops, FlopBreakdown, FlopReport};
pub use lm::{LmExample, LmOutput, LossBreakdown, MoeLm};
pub use moe::{
    dense_mixture_forward, ffn_layer_forward, gate_topk, moe_layer_forward, route_tokens, Dispatch, GateOutput,
};
pub use state::LmState;
pub use weights::{
    expected_shapes, AttentionWeights, BlockWeights, FeedForwardWeights, FfnWeights, LmWeights, MoeWeights, NormWeights,
};
