use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::config::MoeLmConfig;
use crate::error::{Error, Result};
use crate::math::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct NormWeights {
    pub gain: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights {
    pub query: Tensor,
    pub key: Tensor,
    pub value: Tensor,
    pub output: Tensor,
}

/// Two-layer feed-forward block `gelu(x·W_in + b_in)·W_out + b_out`.
#[derive(Clone, Debug, PartialEq)]
pub struct FfnWeights {
    pub w_in: Tensor,
    pub b_in: Tensor,
    pub w_out: Tensor,
    pub b_out: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MoeWeights {
    /// `d × E` routing matrix.
    pub gate: Tensor,
    pub experts: Vec<FfnWeights>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum FeedForwardWeights {
    Dense(FfnWeights),
    Moe(MoeWeights),
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockWeights {
    pub attn_norm: NormWeights,
    pub attn: AttentionWeights,
    pub ffn_norm: NormWeights,
    pub ffn: FeedForwardWeights,
}

/// Every trainable tensor of the LM.
///
/// The same type doubles as the gradient accumulator.
#[derive(Clone, Debug, PartialEq)]
pub struct LmWeights {
    pub embedding: Tensor,
    /// Present only when embeddings are untied.
    pub unembedding: Option<Tensor>,
    pub blocks: Vec<BlockWeights>,
    pub final_norm: NormWeights,
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    /// Normal with std `1/√fan_in`, resampled beyond two standard deviations.
    fn matrix(&mut self, rows: usize, cols: usize, fan_in: usize) -> Tensor {
        let std = 1.0 / (fan_in as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| loop {
                let z: f64 = self.rng.sample(StandardNormal);
                if z.abs() <= 2.0 {
                    break z * std;
                }
            })
            .collect();
        Tensor::new(vec![rows, cols], data).expect("finite init")
    }

    fn ffn(&mut self, d: usize, f: usize) -> FfnWeights {
        FfnWeights {
            w_in: self.matrix(d, f, d),
            b_in: Tensor::zeros(&[f]),
            w_out: self.matrix(f, d, f),
            b_out: Tensor::zeros(&[d]),
        }
    }
}

fn norm(d: usize) -> NormWeights {
    NormWeights {
        gain: Tensor::filled(&[d], 1.0),
        bias: Tensor::zeros(&[d]),
    }
}

impl LmWeights {
    /// Seeded random initialization.
    pub fn init(config: &MoeLmConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let (d, a, f, v) = (config.model_dim, config.attn_dim(), config.ffn_dim(), config.vocab_size);
        // The embedding is a lookup from a one-hot of width V.
        let embedding = init.matrix(v, d, v);
        let unembedding = (!config.tied_embeddings).then(|| init.matrix(d, v, d));
        let blocks = (0..config.num_layers)
            .map(|layer| {
                let attn = AttentionWeights {
                    query: init.matrix(d, a, d),
                    key: init.matrix(d, a, d),
                    value: init.matrix(d, a, d),
                    output: init.matrix(a, d, a),
                };
                let ffn = if config.is_moe_layer(layer) {
                    FeedForwardWeights::Moe(MoeWeights {
                        gate: init.matrix(d, config.num_experts, d),
                        experts: (0..config.num_experts).map(|_| init.ffn(d, f)).collect(),
                    })
                } else {
                    FeedForwardWeights::Dense(init.ffn(d, f))
                };
                BlockWeights {
                    attn_norm: norm(d),
                    attn,
                    ffn_norm: norm(d),
                    ffn,
                }
            })
            .collect();
        Ok(LmWeights {
            embedding,
            unembedding,
            blocks,
            final_norm: norm(d),
        })
    }

    /// All tensors in canonical order with their stable names.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("embedding".to_string(), &self.embedding)];
        if let Some(u) = &self.unembedding {
            out.push(("unembedding".into(), u));
        }
        for (l, b) in self.blocks.iter().enumerate() {
            let p = format!("blocks.{l}");
            out.push((format!("{p}.attn_norm.gain"), &b.attn_norm.gain));
            out.push((format!("{p}.attn_norm.bias"), &b.attn_norm.bias));
            out.push((format!("{p}.attn.query"), &b.attn.query));
            out.push((format!("{p}.attn.key"), &b.attn.key));
            out.push((format!("{p}.attn.value"), &b.attn.value));
            out.push((format!("{p}.attn.output"), &b.attn.output));
            out.push((format!("{p}.ffn_norm.gain"), &b.ffn_norm.gain));
            out.push((format!("{p}.ffn_norm.bias"), &b.ffn_norm.bias));
            match &b.ffn {
                FeedForwardWeights::Dense(ffn) => push_ffn(&mut out, &format!("{p}.ffn"), ffn),
                FeedForwardWeights::Moe(moe) => {
                    out.push((format!("{p}.moe.gate"), &moe.gate));
                    for (e, ffn) in moe.experts.iter().enumerate() {
                        push_ffn(&mut out, &format!("{p}.moe.experts.{e}"), ffn);
                    }
                }
            }
        }
        out.push(("final_norm.gain".into(), &self.final_norm.gain));
        out.push(("final_norm.bias".into(), &self.final_norm.bias));
        out
    }

    /// Mutable tensors in the same order as [`named_tensors`](Self::named_tensors).
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.embedding];
        if let Some(u) = &mut self.unembedding {
            out.push(u);
        }
        for b in &mut self.blocks {
            out.push(&mut b.attn_norm.gain);
            out.push(&mut b.attn_norm.bias);
            out.push(&mut b.attn.query);
            out.push(&mut b.attn.key);
            out.push(&mut b.attn.value);
            out.push(&mut b.attn.output);
            out.push(&mut b.ffn_norm.gain);
            out.push(&mut b.ffn_norm.bias);
            match &mut b.ffn {
                FeedForwardWeights::Dense(ffn) => ffn_mut(&mut out, ffn),
                FeedForwardWeights::Moe(moe) => {
                    out.push(&mut moe.gate);
                    for ffn in &mut moe.experts {
                        ffn_mut(&mut out, ffn);
                    }
                }
            }
        }
        out.push(&mut self.final_norm.gain);
        out.push(&mut self.final_norm.bias);
        out
    }

    pub fn num_params(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.data_mut().fill(0.0);
        }
        z
    }

    pub fn add_assign(&mut self, other: &LmWeights) {
        let theirs = other.named_tensors();
        for (mine, (_, t)) in self.tensors_mut().into_iter().zip(theirs) {
            for (a, b) in mine.data_mut().iter_mut().zip(t.data()) {
                *a += b;
            }
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.named_tensors()
            .iter()
            .flat_map(|(_, t)| t.data().iter().copied())
            .collect()
    }

    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::Dimension(format!(
                "{} values for {} parameters",
                flat.len(),
                self.num_params()
            )));
        }
        let mut offset = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Maps a flat parameter index back to `(tensor name, element index)`.
    pub fn locate(&self, flat_index: usize) -> Option<(String, usize)> {
        let mut offset = 0;
        for (name, t) in self.named_tensors() {
            if flat_index < offset + t.len() {
                return Some((name, flat_index - offset));
            }
            offset += t.len();
        }
        None
    }

    /// Rounds every value to the nearest `f32`, the on-disk precision.
    pub fn round_to_f32(&mut self) {
        for t in self.tensors_mut() {
            for v in t.data_mut() {
                *v = *v as f32 as f64;
            }
        }
    }
}

fn push_ffn<'a>(out: &mut Vec<(String, &'a Tensor)>, prefix: &str, ffn: &'a FfnWeights) {
    out.push((format!("{prefix}.w_in"), &ffn.w_in));
    out.push((format!("{prefix}.b_in"), &ffn.b_in));
    out.push((format!("{prefix}.w_out"), &ffn.w_out));
    out.push((format!("{prefix}.b_out"), &ffn.b_out));
}

fn ffn_mut<'a>(out: &mut Vec<&'a mut Tensor>, ffn: &'a mut FfnWeights) {
    out.push(&mut ffn.w_in);
    out.push(&mut ffn.b_in);
    out.push(&mut ffn.w_out);
    out.push(&mut ffn.b_out);
}

/// Shapes implied by a config, in canonical tensor order.
pub fn expected_shapes(config: &MoeLmConfig) -> Vec<(String, Vec<usize>)> {
    let (d, a, f, v) = (config.model_dim, config.attn_dim(), config.ffn_dim(), config.vocab_size);
    let mut out = vec![("embedding".to_string(), vec![v, d])];
    if !config.tied_embeddings {
        out.push(("unembedding".into(), vec![d, v]));
    }
    let ffn = |out: &mut Vec<(String, Vec<usize>)>, p: String| {
        out.push((format!("{p}.w_in"), vec![d, f]));
        out.push((format!("{p}.b_in"), vec![f]));
        out.push((format!("{p}.w_out"), vec![f, d]));
        out.push((format!("{p}.b_out"), vec![d]));
    };
    for l in 0..config.num_layers {
        let p = format!("blocks.{l}");
        out.push((format!("{p}.attn_norm.gain"), vec![d]));
        out.push((format!("{p}.attn_norm.bias"), vec![d]));
        out.push((format!("{p}.attn.query"), vec![d, a]));
        out.push((format!("{p}.attn.key"), vec![d, a]));
        out.push((format!("{p}.attn.value"), vec![d, a]));
        out.push((format!("{p}.attn.output"), vec![a, d]));
        out.push((format!("{p}.ffn_norm.gain"), vec![d]));
        out.push((format!("{p}.ffn_norm.bias"), vec![d]));
        if config.is_moe_layer(l) {
            out.push((format!("{p}.moe.gate"), vec![d, config.num_experts]));
            for e in 0..config.num_experts {
                ffn(&mut out, format!("{p}.moe.experts.{e}"));
            }
        } else {
            ffn(&mut out, format!("{p}.ffn"));
        }
    }
    out.push(("final_norm.gain".into(), vec![d]));
    out.push(("final_norm.bias".into(), vec![d]));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_match_init() {
        for tied in [true, false] {
            let mut c = MoeLmConfig::tiny(20);
            c.tied_embeddings = tied;
            let w = LmWeights::init(&c, 3).unwrap();
            let got: Vec<(String, Vec<usize>)> = w
                .named_tensors()
                .into_iter()
                .map(|(n, t)| (n, t.shape().to_vec()))
                .collect();
            assert_eq!(got, expected_shapes(&c));
        }
    }

    #[test]
    fn flat_round_trip_and_locate() {
        let c = MoeLmConfig::tiny(12);
        let w = LmWeights::init(&c, 1).unwrap();
        let flat = w.flatten();
        let mut z = w.zeros_like();
        z.assign_flat(&flat).unwrap();
        assert_eq!(z, w);
        assert_eq!(w.locate(0), Some(("embedding".into(), 0)));
        assert_eq!(w.locate(12 * 16), Some(("blocks.0.attn_norm.gain".into(), 0)));
        assert_eq!(w.locate(flat.len()), None);
    }

    #[test]
    fn init_is_seeded() {
        let c = MoeLmConfig::tiny(12);
        assert_eq!(LmWeights::init(&c, 5).unwrap(), LmWeights::init(&c, 5).unwrap());
        assert_ne!(LmWeights::init(&c, 5).unwrap(), LmWeights::init(&c, 6).unwrap());
    }
}
