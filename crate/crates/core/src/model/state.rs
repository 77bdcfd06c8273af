//! Incremental scoring with a key/value cache, for beam search.

use super::layers::{ffn_forward, layer_norm};
use super::lm::MoeLm;
use super::moe::{moe_forward, Dispatch};
use super::weights::FeedForwardWeights;
use crate::error::{Error, Result};
use crate::math::{dot, gemm, softmax_in_place};

/// Cached keys and values of every layer for the tokens consumed so far.
#[derive(Clone, Debug, PartialEq)]
pub struct LmState {
    position: usize,
    /// Per layer, `position × attn_dim` keys.
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
}

impl LmState {
    pub fn position(&self) -> usize {
        self.position
    }
}

impl MoeLm {
    /// State before any token has been consumed.
    pub fn start_state(&self) -> LmState {
        LmState {
            position: 0,
            keys: vec![Vec::new(); self.config.num_layers],
            values: vec![Vec::new(); self.config.num_layers],
        }
    }

    /// Consumes `next_token` and returns the extended state together with the
    /// distribution of the token that follows it. The input state is left
    /// untouched.
    pub fn lm_score_step(&self, state: &LmState, next_token: u32) -> Result<(LmState, Vec<f64>)> {
        let mut next = state.clone();
        let dist = self.advance(&mut next, next_token)?;
        Ok((next, dist))
    }

    /// In-place form of [`lm_score_step`](Self::lm_score_step).
    pub fn advance(&self, state: &mut LmState, token: u32) -> Result<Vec<f64>> {
        let cfg = &self.config;
        if state.position >= cfg.max_seq_len {
            return Err(Error::Argument(format!(
                "state already holds max_seq_len = {} tokens",
                cfg.max_seq_len
            )));
        }
        if token as usize >= cfg.vocab_size {
            return Err(Error::Argument(format!(
                "token id {token} outside vocabulary of {}",
                cfg.vocab_size
            )));
        }
        let (d, a, hd) = (cfg.model_dim, cfg.attn_dim(), cfg.head_dim);
        let pos = state.position;
        let mut x = vec![0.0; d];
        self.embed(token, pos, &mut x);
        let scale = 1.0 / (hd as f64).sqrt();

        for (l, block) in self.weights.blocks.iter().enumerate() {
            let (h, _) = layer_norm(&x, d, &block.attn_norm);
            let project = |m: &crate::math::Tensor| {
                let mut out = vec![0.0; a];
                gemm(&h, m.data(), 1, d, a, &mut out);
                out
            };
            let q = project(&block.attn.query);
            state.keys[l].extend(project(&block.attn.key));
            state.values[l].extend(project(&block.attn.value));
            let (keys, values) = (&state.keys[l], &state.values[l]);

            let mut ctx = vec![0.0; a];
            let mut scores = vec![0.0; pos + 1];
            for head in 0..cfg.num_heads {
                let off = head * hd;
                let qh = &q[off..off + hd];
                for (j, s) in scores.iter_mut().enumerate() {
                    *s = dot(qh, &keys[j * a + off..j * a + off + hd]) * scale;
                }
                softmax_in_place(&mut scores);
                let ch = &mut ctx[off..off + hd];
                for (j, &p) in scores.iter().enumerate() {
                    for (c, v) in ch.iter_mut().zip(&values[j * a + off..j * a + off + hd]) {
                        *c += p * v;
                    }
                }
            }
            let mut attn_out = vec![0.0; d];
            gemm(&ctx, block.attn.output.data(), 1, a, d, &mut attn_out);
            for (xi, v) in x.iter_mut().zip(&attn_out) {
                *xi += v;
            }

            let (h2, _) = layer_norm(&x, d, &block.ffn_norm);
            let y = match &block.ffn {
                FeedForwardWeights::Dense(w) => ffn_forward(&h2, d, w).0,
                FeedForwardWeights::Moe(w) => moe_forward(&h2, d, w, cfg.experts_per_token, Dispatch::Sparse)?.0,
            };
            for (xi, v) in x.iter_mut().zip(&y) {
                *xi += v;
            }
        }
        state.position += 1;
        let (hidden, _) = layer_norm(&x, d, &self.weights.final_norm);
        crate::math::ensure_finite(&hidden, "final hidden state")?;
        self.output_log_probs(&hidden)
    }
}
