use rayon::prelude::*;

use super::config::MoeLmConfig;
use super::layers::{
    attention_backward, attention_forward, ffn_backward, ffn_forward, layer_norm, layer_norm_backward,
    positional_encoding, AttnShape, AttnTape, FfnTape, NormTape,
};
use super::moe::{moe_backward, moe_forward, Dispatch, MoeTape};
use super::weights::{FeedForwardWeights, LmWeights};
use crate::error::{Error, Result};
use crate::math::{ensure_finite, gemm, gemm_nt, gemm_tn, log_softmax_in_place, Tensor};
use crate::tokenizer::{BOS, PAD};

/// Decoder-only transformer LM: configuration plus weights.
#[derive(Clone, Debug, PartialEq)]
pub struct MoeLm {
    pub config: MoeLmConfig,
    pub weights: LmWeights,
}

/// One input row. Position `t` predicts `targets[t]`; attention stays
/// within a segment and positions restart at every segment.
#[derive(Clone, Debug, PartialEq)]
pub struct LmExample {
    pub tokens: Vec<u32>,
    pub segments: Vec<u32>,
    pub positions: Vec<usize>,
    pub targets: Vec<Option<u32>>,
}

impl LmExample {
    /// A single unpacked sequence predicting its own next tokens.
    pub fn from_sequence(tokens: &[u32]) -> Self {
        let n = tokens.len();
        LmExample {
            tokens: tokens.to_vec(),
            segments: vec![1; n],
            positions: (0..n).collect(),
            targets: (0..n).map(|t| tokens.get(t + 1).copied()).collect(),
        }
    }
}

/// Full-sequence output of [`MoeLm::lm_forward`].
#[derive(Clone, Debug)]
pub struct LmOutput {
    /// `T × V`; row `t` is the distribution of the token after position `t`.
    pub log_probs: Tensor,
    pub aux_loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    /// `cross_entropy + aux_loss_weight · aux`.
    pub total: f64,
    /// Mean negative log-likelihood over unmasked targets.
    pub cross_entropy: f64,
    /// Load-balancing loss averaged over MoE layers.
    pub aux: f64,
    pub target_tokens: usize,
    /// Per MoE layer, the fraction of tokens routed to each expert; each
    /// row sums to k.
    pub routing: Vec<Vec<f64>>,
}

enum FfTape {
    Dense(FfnTape),
    Moe(MoeTape),
}

struct BlockTape {
    attn_norm: NormTape,
    attn: AttnTape,
    ffn_norm: NormTape,
    ffn: FfTape,
}

struct RowTape {
    blocks: Vec<BlockTape>,
    final_norm: NormTape,
    final_hidden: Vec<f64>,
    log_probs: Vec<f64>,
}

impl MoeLm {
    pub fn new(config: MoeLmConfig, seed: u64) -> Result<Self> {
        let weights = LmWeights::init(&config, seed)?;
        Ok(MoeLm { config, weights })
    }

    pub(crate) fn attn_shape(&self) -> AttnShape {
        AttnShape {
            model_dim: self.config.model_dim,
            num_heads: self.config.num_heads,
            head_dim: self.config.head_dim,
        }
    }

    pub(crate) fn embed(&self, token: u32, position: usize, out: &mut [f64]) {
        let d = self.config.model_dim;
        let scale = (d as f64).sqrt();
        for (o, e) in out.iter_mut().zip(self.weights.embedding.row(token as usize)) {
            *o = e * scale;
        }
        positional_encoding(position, d, out);
    }

    /// `hidden · Eᵀ` (tied) or `hidden · U`, then row-wise log-softmax.
    pub(crate) fn output_log_probs(&self, hidden: &[f64]) -> Result<Vec<f64>> {
        let (d, v) = (self.config.model_dim, self.config.vocab_size);
        let rows = hidden.len() / d;
        let mut logits = vec![0.0; rows * v];
        match &self.weights.unembedding {
            None => gemm_nt(hidden, self.weights.embedding.data(), rows, d, v, &mut logits),
            Some(u) => gemm(hidden, u.data(), rows, d, v, &mut logits),
        }
        for r in 0..rows {
            log_softmax_in_place(&mut logits[r * v..(r + 1) * v])?;
        }
        Ok(logits)
    }

    fn check_example(&self, ex: &LmExample) -> Result<()> {
        let n = ex.tokens.len();
        if n == 0 {
            return Err(Error::Argument("empty sequence".into()));
        }
        if n > self.config.max_seq_len {
            return Err(Error::Argument(format!(
                "sequence of {n} tokens exceeds max_seq_len {}",
                self.config.max_seq_len
            )));
        }
        if ex.segments.len() != n || ex.positions.len() != n || ex.targets.len() != n {
            return Err(Error::Dimension("example fields differ in length".into()));
        }
        let v = self.config.vocab_size as u32;
        let bad = ex.tokens.iter().chain(ex.targets.iter().flatten()).find(|&&id| id >= v);
        if let Some(id) = bad {
            return Err(Error::Argument(format!("token id {id} outside vocabulary of {v}")));
        }
        if let Some(&p) = ex.positions.iter().find(|&&p| p >= self.config.max_seq_len) {
            return Err(Error::Argument(format!("position {p} beyond max_seq_len")));
        }
        Ok(())
    }

    fn forward_row(&self, ex: &LmExample, dispatch: Dispatch) -> Result<RowTape> {
        self.check_example(ex)?;
        let cfg = &self.config;
        let (d, t) = (cfg.model_dim, ex.tokens.len());
        let mut x = vec![0.0; t * d];
        for (i, (&tok, &pos)) in ex.tokens.iter().zip(&ex.positions).enumerate() {
            self.embed(tok, pos, &mut x[i * d..(i + 1) * d]);
        }
        let mut blocks = Vec::with_capacity(cfg.num_layers);
        for block in &self.weights.blocks {
            let (h, attn_norm) = layer_norm(&x, d, &block.attn_norm);
            let (a, attn) = attention_forward(&h, &ex.segments, self.attn_shape(), &block.attn);
            add_in_place(&mut x, &a);
            let (h2, ffn_norm) = layer_norm(&x, d, &block.ffn_norm);
            let (y, ffn) = match &block.ffn {
                FeedForwardWeights::Dense(w) => {
                    let (y, tape) = ffn_forward(&h2, d, w);
                    (y, FfTape::Dense(tape))
                }
                FeedForwardWeights::Moe(w) => {
                    let (y, tape) = moe_forward(&h2, d, w, cfg.experts_per_token, dispatch)?;
                    (y, FfTape::Moe(tape))
                }
            };
            add_in_place(&mut x, &y);
            blocks.push(BlockTape {
                attn_norm,
                attn,
                ffn_norm,
                ffn,
            });
        }
        let (final_hidden, final_norm) = layer_norm(&x, d, &self.weights.final_norm);
        ensure_finite(&final_hidden, "final hidden state")?;
        let log_probs = self.output_log_probs(&final_hidden)?;
        Ok(RowTape {
            blocks,
            final_norm,
            final_hidden,
            log_probs,
        })
    }

    fn backward_row(&self, ex: &LmExample, tape: &RowTape, ce_scale: f64, aux_coef: &[Vec<f64>]) -> LmWeights {
        let cfg = &self.config;
        let (d, v, t) = (cfg.model_dim, cfg.vocab_size, ex.tokens.len());
        let mut grad = self.weights.zeros_like();

        let mut dlogits = vec![0.0; t * v];
        for (i, target) in ex.targets.iter().enumerate() {
            let Some(target) = *target else { continue };
            let row = &mut dlogits[i * v..(i + 1) * v];
            for (g, lp) in row.iter_mut().zip(&tape.log_probs[i * v..(i + 1) * v]) {
                *g = lp.exp() * ce_scale;
            }
            row[target as usize] -= ce_scale;
        }
        let mut dhidden = vec![0.0; t * d];
        match (&self.weights.unembedding, &mut grad.unembedding) {
            (Some(u), Some(gu)) => {
                gemm_tn(&tape.final_hidden, &dlogits, t, d, v, gu.data_mut());
                gemm_nt(&dlogits, u.data(), t, v, d, &mut dhidden);
            }
            _ => {
                gemm_tn(&dlogits, &tape.final_hidden, t, v, d, grad.embedding.data_mut());
                gemm(&dlogits, self.weights.embedding.data(), t, v, d, &mut dhidden);
            }
        }
        let mut dx = layer_norm_backward(
            &dhidden,
            d,
            &tape.final_norm,
            &self.weights.final_norm,
            &mut grad.final_norm,
        );

        let aux_mask: Vec<bool> = ex.tokens.iter().map(|&tok| tok != PAD).collect();
        let mut moe_ordinal = cfg.num_moe_layers();
        for ((block, bt), gb) in self
            .weights
            .blocks
            .iter()
            .zip(&tape.blocks)
            .zip(grad.blocks.iter_mut())
            .rev()
        {
            let dh2 = match (&block.ffn, &bt.ffn, &mut gb.ffn) {
                (FeedForwardWeights::Dense(w), FfTape::Dense(ft), FeedForwardWeights::Dense(g)) => {
                    ffn_backward(&dx, d, ft, w, g)
                }
                (FeedForwardWeights::Moe(w), FfTape::Moe(mt), FeedForwardWeights::Moe(g)) => {
                    moe_ordinal -= 1;
                    moe_backward(&dx, d, mt, w, g, &aux_coef[moe_ordinal], &aux_mask)
                }
                _ => unreachable!("tape matches weights"),
            };
            add_in_place(
                &mut dx,
                &layer_norm_backward(&dh2, d, &bt.ffn_norm, &block.ffn_norm, &mut gb.ffn_norm),
            );
            let dh = attention_backward(
                &dx,
                &ex.segments,
                self.attn_shape(),
                &bt.attn,
                &block.attn,
                &mut gb.attn,
            );
            add_in_place(
                &mut dx,
                &layer_norm_backward(&dh, d, &bt.attn_norm, &block.attn_norm, &mut gb.attn_norm),
            );
        }

        let scale = (d as f64).sqrt();
        for (i, &tok) in ex.tokens.iter().enumerate() {
            let row = grad.embedding.row_mut(tok as usize);
            for (g, v) in row.iter_mut().zip(&dx[i * d..(i + 1) * d]) {
                *g += scale * v;
            }
        }
        grad
    }

    /// Load-balancing statistics over every non-PAD token of the batch.
    /// Returns `(aux, routing fractions, per-layer gradient coefficients)`.
    fn aux_statistics(&self, batch: &[LmExample], tapes: &[RowTape]) -> (f64, Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let cfg = &self.config;
        let (e_count, k) = (cfg.num_experts, cfg.experts_per_token);
        let moe_layers: Vec<usize> = (0..cfg.num_layers).filter(|&l| cfg.is_moe_layer(l)).collect();
        if moe_layers.is_empty() {
            return (0.0, Vec::new(), Vec::new());
        }
        let n_moe = moe_layers.len() as f64;
        let mut aux = 0.0;
        let mut routing = Vec::new();
        let mut coefs = Vec::new();
        for &l in &moe_layers {
            let mut counts = vec![0.0; e_count];
            let mut psum = vec![0.0; e_count];
            let mut n = 0.0;
            for (ex, tape) in batch.iter().zip(tapes) {
                let FfTape::Moe(mt) = &tape.blocks[l].ffn else {
                    unreachable!("moe layer")
                };
                for (tok, &id) in ex.tokens.iter().enumerate() {
                    if id == PAD {
                        continue;
                    }
                    n += 1.0;
                    for &e in &mt.gates[tok].expert_indices {
                        counts[e] += 1.0;
                    }
                    for (s, p) in psum.iter_mut().zip(&mt.probs[tok * e_count..(tok + 1) * e_count]) {
                        *s += p;
                    }
                }
            }
            if n == 0.0 {
                routing.push(vec![0.0; e_count]);
                coefs.push(vec![0.0; e_count]);
                continue;
            }
            let load: Vec<f64> = counts.iter().map(|c| c / (n * k as f64)).collect();
            let importance: Vec<f64> = psum.iter().map(|p| p / n).collect();
            aux += e_count as f64 * load.iter().zip(&importance).map(|(f, p)| f * p).sum::<f64>() / n_moe;
            coefs.push(
                load.iter()
                    .map(|f| cfg.aux_loss_weight * e_count as f64 * f / (n * n_moe))
                    .collect(),
            );
            routing.push(counts.iter().map(|c| c / n).collect());
        }
        (aux, routing, coefs)
    }

    fn forward_batch(&self, batch: &[LmExample], dispatch: Dispatch) -> Result<(LossBreakdown, Vec<RowTape>)> {
        if batch.is_empty() {
            return Err(Error::Argument("empty batch".into()));
        }
        let tapes: Vec<RowTape> = batch
            .par_iter()
            .map(|ex| self.forward_row(ex, dispatch))
            .collect::<Result<_>>()?;
        let v = self.config.vocab_size;
        let mut nll = 0.0;
        let mut targets = 0usize;
        for (ex, tape) in batch.iter().zip(&tapes) {
            for (i, target) in ex.targets.iter().enumerate() {
                if let Some(target) = *target {
                    nll -= tape.log_probs[i * v + target as usize];
                    targets += 1;
                }
            }
        }
        if targets == 0 {
            return Err(Error::Argument("batch has no target tokens".into()));
        }
        let (aux, routing, _) = self.aux_statistics(batch, &tapes);
        let cross_entropy = nll / targets as f64;
        let total = cross_entropy + self.config.aux_loss_weight * aux;
        if !total.is_finite() {
            return Err(Error::Numeric(format!("loss is {total}")));
        }
        Ok((
            LossBreakdown {
                total,
                cross_entropy,
                aux,
                target_tokens: targets,
                routing,
            },
            tapes,
        ))
    }

    /// Masked mean cross-entropy plus the weighted load-balancing loss.
    pub fn loss(&self, batch: &[LmExample], dispatch: Dispatch) -> Result<LossBreakdown> {
        self.forward_batch(batch, dispatch).map(|(loss, _)| loss)
    }

    /// Loss and its gradient with respect to every weight. Row gradients are
    /// summed in batch order, so the result does not depend on thread count.
    pub fn loss_and_gradient(&self, batch: &[LmExample], dispatch: Dispatch) -> Result<(LossBreakdown, LmWeights)> {
        let (loss, tapes) = self.forward_batch(batch, dispatch)?;
        let (_, _, coefs) = self.aux_statistics(batch, &tapes);
        let ce_scale = 1.0 / loss.target_tokens as f64;
        let row_grads: Vec<LmWeights> = batch
            .par_iter()
            .zip(tapes.par_iter())
            .map(|(ex, tape)| self.backward_row(ex, tape, ce_scale, &coefs))
            .collect();
        let mut iter = row_grads.into_iter();
        let mut grad = iter.next().expect("nonempty batch");
        for g in iter {
            grad.add_assign(&g);
        }
        Ok((loss, grad))
    }

    /// Log-distributions for every position of a BOS-prefixed sequence.
    pub fn lm_forward(&self, seq: &[u32]) -> Result<LmOutput> {
        if seq.first() != Some(&BOS) {
            return Err(Error::Argument("sequence must start with BOS".into()));
        }
        let ex = LmExample::from_sequence(seq);
        let tape = self.forward_row(&ex, Dispatch::Sparse)?;
        let (aux, _, _) = self.aux_statistics(std::slice::from_ref(&ex), std::slice::from_ref(&tape));
        Ok(LmOutput {
            log_probs: Tensor::new(vec![seq.len(), self.config.vocab_size], tape.log_probs)?,
            aux_loss: aux,
        })
    }
}

fn add_in_place(x: &mut [f64], y: &[f64]) {
    for (a, b) in x.iter_mut().zip(y) {
        *a += b;
    }
}
