//! Closed-form parameter and compute accounting.

use serde::{Deserialize, Serialize};

use super::config::MoeLmConfig;

/// Floating-point operations per token, counted as two per multiply-add.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopBreakdown {
    /// Q/K/V/output projections plus score and context products over a
    /// full `max_seq_len` context.
    pub attention: u64,
    pub dense_ffn: u64,
    /// Exactly `experts_per_token` expert applications per MoE layer.
    pub moe_expert: u64,
    /// The `d × E` routing product of every MoE layer.
    pub gating: u64,
    pub embedding_softmax: u64,
}

impl FlopBreakdown {
    pub fn total(&self) -> u64 {
        self.attention + self.dense_ffn + self.moe_expert + self.gating + self.embedding_softmax
    }

    pub fn non_gating(&self) -> u64 {
        self.total() - self.gating
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopReport {
    pub total_params: u64,
    pub active_params_per_token: u64,
    pub flops_per_token: FlopBreakdown,
}

impl FlopReport {
    pub fn active_fraction(&self) -> f64 {
        self.active_params_per_token as f64 / self.total_params as f64
    }
}

/// Parameter and per-token compute counts implied by a config. The counts
/// match the tensors [`LmWeights::init`](super::LmWeights::init) allocates.
pub fn count_params_flops(config: &MoeLmConfig) -> FlopReport {
    let d = config.model_dim as u64;
    let a = config.attn_dim() as u64;
    let f = config.ffn_dim() as u64;
    let v = config.vocab_size as u64;
    let e = config.num_experts as u64;
    let k = config.experts_per_token as u64;
    let ctx = config.max_seq_len as u64;
    let moe_layers = config.num_moe_layers() as u64;
    let dense_layers = config.num_layers as u64 - moe_layers;
    let layers = config.num_layers as u64;

    let ffn_params = 2 * d * f + f + d;
    let attn_params = 4 * d * a;
    let norm_params = 2 * d;
    let gate_params = d * e;
    let embedding = v * d + if config.tied_embeddings { 0 } else { d * v };

    let shared = embedding
        + layers * (attn_params + 2 * norm_params)
        + norm_params
        + dense_layers * ffn_params
        + moe_layers * gate_params;
    let total_params = shared + moe_layers * e * ffn_params;
    let active_params_per_token = shared + moe_layers * k * ffn_params;

    let ffn_macs = 2 * d * f;
    let flops_per_token = FlopBreakdown {
        attention: 2 * layers * (4 * d * a + 2 * a * ctx),
        dense_ffn: 2 * dense_layers * ffn_macs,
        moe_expert: 2 * moe_layers * k * ffn_macs,
        gating: 2 * moe_layers * d * e,
        embedding_softmax: 2 * d * v,
    };
    FlopReport {
        total_params,
        active_params_per_token,
        flops_per_token,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::LmWeights;

    #[test]
    fn counts_match_allocated_weights() {
        for (experts, tied) in [(1, true), (2, false), (4, true), (8, true)] {
            let mut c = MoeLmConfig::tiny(30);
            c.num_layers = 4;
            c.num_experts = experts;
            c.experts_per_token = experts.min(2);
            c.tied_embeddings = tied;
            let w = LmWeights::init(&c, 0).unwrap();
            assert_eq!(count_params_flops(&c).total_params, w.num_params() as u64);
        }
    }

    #[test]
    fn dense_config_is_fully_active() {
        let r = count_params_flops(&MoeLmConfig::tiny(30).dense());
        assert_eq!(r.total_params, r.active_params_per_token);
        assert_eq!(r.flops_per_token.gating, 0);
    }
}
