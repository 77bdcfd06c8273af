use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::RESERVED;

/// Architecture hyperparameters of the decoder-only LM.
///
/// Feed-forward blocks in layers `stride-1, 2·stride-1, …` are mixture-of-experts
/// blocks; the rest are dense. With a single expert every block is dense and
/// the model is an ordinary transformer LM.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MoeLmConfig {
    pub num_layers: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    pub ffn_multiplier: usize,
    pub num_experts: usize,
    pub experts_per_token: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub moe_layer_stride: usize,
    pub aux_loss_weight: f64,
    pub tied_embeddings: bool,
}

impl Default for MoeLmConfig {
    fn default() -> Self {
        MoeLmConfig::base_64e()
    }
}

impl MoeLmConfig {
    /// 12 layers, d=768, 12 heads of 64, 64 experts with top-2 routing, a
    /// 16,384-piece vocabulary and 1,024-token context.
    pub fn base_64e() -> Self {
        MoeLmConfig {
            num_layers: 12,
            model_dim: 768,
            num_heads: 12,
            head_dim: 64,
            ffn_multiplier: 4,
            num_experts: 64,
            experts_per_token: 2,
            vocab_size: 16_384,
            max_seq_len: 1024,
            moe_layer_stride: 2,
            aux_loss_weight: 0.01,
            tied_embeddings: true,
        }
    }

    /// A few-thousand-parameter model for tests.
    pub fn tiny(vocab_size: usize) -> Self {
        MoeLmConfig {
            num_layers: 2,
            model_dim: 16,
            num_heads: 2,
            head_dim: 8,
            ffn_multiplier: 4,
            num_experts: 4,
            experts_per_token: 2,
            vocab_size,
            max_seq_len: 64,
            moe_layer_stride: 2,
            aux_loss_weight: 0.01,
            tied_embeddings: true,
        }
    }

    /// The same shape with every feed-forward block dense.
    pub fn dense(mut self) -> Self {
        self.num_experts = 1;
        self.experts_per_token = 1;
        self
    }

    pub fn ffn_dim(&self) -> usize {
        self.ffn_multiplier * self.model_dim
    }

    /// Width of the concatenated attention heads.
    pub fn attn_dim(&self) -> usize {
        self.num_heads * self.head_dim
    }

    pub fn is_moe_layer(&self, layer: usize) -> bool {
        self.num_experts > 1 && layer % self.moe_layer_stride == self.moe_layer_stride - 1
    }

    pub fn num_moe_layers(&self) -> usize {
        (0..self.num_layers).filter(|&l| self.is_moe_layer(l)).count()
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_layers", self.num_layers),
            ("model_dim", self.model_dim),
            ("num_heads", self.num_heads),
            ("head_dim", self.head_dim),
            ("ffn_multiplier", self.ffn_multiplier),
            ("num_experts", self.num_experts),
            ("experts_per_token", self.experts_per_token),
            ("max_seq_len", self.max_seq_len),
            ("moe_layer_stride", self.moe_layer_stride),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.experts_per_token > self.num_experts {
            return Err(Error::Config(format!(
                "experts_per_token {} exceeds num_experts {}",
                self.experts_per_token, self.num_experts
            )));
        }
        if self.vocab_size <= RESERVED {
            return Err(Error::Config(format!(
                "vocab_size {} leaves no room beyond the reserved pieces",
                self.vocab_size
            )));
        }
        if !(self.aux_loss_weight >= 0.0 && self.aux_loss_weight.is_finite()) {
            return Err(Error::Config("aux_loss_weight must be finite and >= 0".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layer_parity() {
        let c = MoeLmConfig::base_64e();
        let moe: Vec<usize> = (0..12).filter(|&l| c.is_moe_layer(l)).collect();
        assert_eq!(moe, vec![1, 3, 5, 7, 9, 11]);
        assert_eq!(c.clone().dense().num_moe_layers(), 0);
        assert_eq!(c.attn_dim(), 768);
    }

    #[test]
    fn k_above_e_rejected() {
        let mut c = MoeLmConfig::tiny(32);
        c.experts_per_token = 5;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        c.experts_per_token = 2;
        c.validate().unwrap();
    }
}
