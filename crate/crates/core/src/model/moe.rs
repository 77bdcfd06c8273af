//! Token-level top-k routing over a bank of feed-forward experts.

use serde::{Deserialize, Serialize};

use super::layers::{ffn_backward, ffn_forward, FfnTape};
use super::weights::{FfnWeights, MoeWeights};
use crate::error::{Error, Result};
use crate::math::{gemm, gemm_nt, softmax_in_place, Tensor};

/// Routing decision for a single token.
#[derive(Clone, Debug, PartialEq)]
pub struct GateOutput {
    /// Selected experts, highest logit first; ties go to the lower index.
    pub expert_indices: Vec<usize>,
    /// Softmax over all logits restricted to the selected experts and
    /// renormalized, aligned with `expert_indices`.
    pub combine_weights: Vec<f64>,
    pub all_gate_logits: Vec<f64>,
}

/// How a mixture-of-experts block evaluates its experts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Dispatch {
    /// Each token runs only its top-k experts.
    #[default]
    Sparse,
    /// Every token runs every expert, weighted by the full gate softmax.
    /// Only defined when k equals the number of experts, where it is the
    /// dense model the sparse block must reproduce.
    DenseMixture,
}

pub(crate) fn select_top_k(logits: Vec<f64>, k: usize) -> GateOutput {
    let mut order: Vec<usize> = (0..logits.len()).collect();
    // Stable sort keeps lower indices first among equal logits.
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]));
    order.truncate(k);
    let mut weights: Vec<f64> = order.iter().map(|&e| logits[e]).collect();
    softmax_in_place(&mut weights);
    GateOutput {
        expert_indices: order,
        combine_weights: weights,
        all_gate_logits: logits,
    }
}

/// Routes one token representation through a `d × E` gate matrix.
pub fn gate_topk(token_repr: &[f64], gate_matrix: &Tensor, k: usize) -> Result<GateOutput> {
    let shape = gate_matrix.shape();
    if shape.len() != 2 || shape[0] != token_repr.len() {
        return Err(Error::Dimension(format!(
            "token of width {} against gate {:?}",
            token_repr.len(),
            shape
        )));
    }
    let experts = shape[1];
    if k == 0 || k > experts {
        return Err(Error::Config(format!("cannot select {k} of {experts} experts")));
    }
    let mut logits = vec![0.0; experts];
    gemm(
        token_repr,
        gate_matrix.data(),
        1,
        token_repr.len(),
        experts,
        &mut logits,
    );
    Ok(select_top_k(logits, k))
}

pub(crate) struct ExpertTape {
    /// `(token, slot)` pairs routed here, in token order.
    routed: Vec<(usize, usize)>,
    ffn: FfnTape,
    outputs: Vec<f64>,
}

pub(crate) struct MoeTape {
    input: Vec<f64>,
    pub(crate) gates: Vec<GateOutput>,
    /// Full gate softmax per token, `T × E`.
    pub(crate) probs: Vec<f64>,
    experts: Vec<Option<ExpertTape>>,
}

pub(crate) fn moe_forward(
    x: &[f64],
    d: usize,
    w: &MoeWeights,
    k: usize,
    dispatch: Dispatch,
) -> Result<(Vec<f64>, MoeTape)> {
    let t = x.len() / d;
    let e_count = w.experts.len();
    if k == 0 || k > e_count {
        return Err(Error::Config(format!("cannot select {k} of {e_count} experts")));
    }
    if dispatch == Dispatch::DenseMixture && k != e_count {
        return Err(Error::Config(format!(
            "dense mixture needs k == E, got k={k}, E={e_count}"
        )));
    }
    let mut logits = vec![0.0; t * e_count];
    gemm(x, w.gate.data(), t, d, e_count, &mut logits);
    let mut probs = logits.clone();
    let gates: Vec<GateOutput> = (0..t)
        .map(|i| {
            let row = logits[i * e_count..(i + 1) * e_count].to_vec();
            softmax_in_place(&mut probs[i * e_count..(i + 1) * e_count]);
            match dispatch {
                Dispatch::Sparse => select_top_k(row, k),
                Dispatch::DenseMixture => GateOutput {
                    expert_indices: (0..e_count).collect(),
                    combine_weights: probs[i * e_count..(i + 1) * e_count].to_vec(),
                    all_gate_logits: row,
                },
            }
        })
        .collect();

    let mut routed: Vec<Vec<(usize, usize)>> = vec![Vec::new(); e_count];
    for (tok, g) in gates.iter().enumerate() {
        for (slot, &e) in g.expert_indices.iter().enumerate() {
            routed[e].push((tok, slot));
        }
    }

    let mut experts = Vec::with_capacity(e_count);
    for (e, assignments) in routed.into_iter().enumerate() {
        if assignments.is_empty() {
            experts.push(None);
            continue;
        }
        let mut gathered = Vec::with_capacity(assignments.len() * d);
        for &(tok, _) in &assignments {
            gathered.extend_from_slice(&x[tok * d..(tok + 1) * d]);
        }
        let (outputs, ffn) = ffn_forward(&gathered, d, &w.experts[e]);
        experts.push(Some(ExpertTape {
            routed: assignments,
            ffn,
            outputs,
        }));
    }

    // Per-token sums run in slot order so the result does not depend on how
    // experts were batched.
    let mut out = vec![0.0; t * d];
    let mut slot_rows: Vec<Vec<Option<(usize, usize)>>> = vec![vec![None; k.max(e_count)]; t];
    for (e, tape) in experts.iter().enumerate() {
        if let Some(tape) = tape {
            for (row, &(tok, slot)) in tape.routed.iter().enumerate() {
                slot_rows[tok][slot] = Some((e, row));
            }
        }
    }
    for tok in 0..t {
        let orow = &mut out[tok * d..(tok + 1) * d];
        for (slot, entry) in slot_rows[tok].iter().enumerate() {
            let Some((e, row)) = *entry else { continue };
            let wgt = gates[tok].combine_weights[slot];
            let src = &experts[e].as_ref().expect("routed expert").outputs[row * d..(row + 1) * d];
            for (o, v) in orow.iter_mut().zip(src) {
                *o += wgt * v;
            }
        }
    }

    Ok((
        out,
        MoeTape {
            input: x.to_vec(),
            gates,
            probs,
            experts,
        },
    ))
}

/// Backward pass. `aux_coef[e]` is the loss gradient with respect to each
/// token's full gate probability for expert `e`; it applies to tokens whose
/// `aux_mask` entry is true.
pub(crate) fn moe_backward(
    dy: &[f64],
    d: usize,
    tape: &MoeTape,
    w: &MoeWeights,
    grad: &mut MoeWeights,
    aux_coef: &[f64],
    aux_mask: &[bool],
) -> Vec<f64> {
    let t = dy.len() / d;
    let e_count = w.experts.len();
    let mut dx = vec![0.0; t * d];
    // Gradient w.r.t. each token's combine weights, per slot.
    let mut dweights: Vec<Vec<f64>> = tape.gates.iter().map(|g| vec![0.0; g.expert_indices.len()]).collect();

    for (e, et) in tape.experts.iter().enumerate() {
        let Some(et) = et else { continue };
        let mut dout = vec![0.0; et.routed.len() * d];
        for (row, &(tok, slot)) in et.routed.iter().enumerate() {
            let dyt = &dy[tok * d..(tok + 1) * d];
            let out = &et.outputs[row * d..(row + 1) * d];
            dweights[tok][slot] = crate::math::dot(dyt, out);
            let wgt = tape.gates[tok].combine_weights[slot];
            for (g, v) in dout[row * d..(row + 1) * d].iter_mut().zip(dyt) {
                *g = wgt * v;
            }
        }
        let dgathered = ffn_backward(&dout, d, &et.ffn, &w.experts[e], &mut grad.experts[e]);
        for (row, &(tok, _)) in et.routed.iter().enumerate() {
            for (g, v) in dx[tok * d..(tok + 1) * d]
                .iter_mut()
                .zip(&dgathered[row * d..(row + 1) * d])
            {
                *g += v;
            }
        }
    }

    let mut dlogits = vec![0.0; t * e_count];
    for tok in 0..t {
        let gate = &tape.gates[tok];
        let dl = &mut dlogits[tok * e_count..(tok + 1) * e_count];
        // Combine weights are a softmax over the selected logits (all logits
        // for the dense mixture).
        let wsum: f64 = gate
            .combine_weights
            .iter()
            .zip(&dweights[tok])
            .map(|(w, g)| w * g)
            .sum();
        for (slot, &e) in gate.expert_indices.iter().enumerate() {
            dl[e] += gate.combine_weights[slot] * (dweights[tok][slot] - wsum);
        }
        if aux_mask[tok] {
            let p = &tape.probs[tok * e_count..(tok + 1) * e_count];
            let psum: f64 = p.iter().zip(aux_coef).map(|(p, c)| p * c).sum();
            for e in 0..e_count {
                dl[e] += p[e] * (aux_coef[e] - psum);
            }
        }
    }
    crate::math::gemm_tn(&tape.input, &dlogits, t, d, e_count, grad.gate.data_mut());
    gemm_nt(&dlogits, w.gate.data(), t, e_count, d, &mut dx);
    dx
}

/// Applies a mixture-of-experts block to `T × d` token representations with
/// top-k routing. No capacity limit: every token reaches its k experts.
pub fn moe_layer_forward(token_reprs: &Tensor, weights: &MoeWeights, k: usize) -> Result<Tensor> {
    let (out, _) = checked_moe(token_reprs, weights, k, Dispatch::Sparse)?;
    Tensor::new(token_reprs.shape().to_vec(), out)
}

/// Routing decisions for every token, as used by [`moe_layer_forward`].
pub fn route_tokens(token_reprs: &Tensor, weights: &MoeWeights, k: usize) -> Result<Vec<GateOutput>> {
    let (_, tape) = checked_moe(token_reprs, weights, k, Dispatch::Sparse)?;
    Ok(tape.gates)
}

/// Every expert on every token, weighted by the full gate softmax.
pub fn dense_mixture_forward(token_reprs: &Tensor, weights: &MoeWeights) -> Result<Tensor> {
    let k = weights.experts.len();
    let (out, _) = checked_moe(token_reprs, weights, k, Dispatch::DenseMixture)?;
    Tensor::new(token_reprs.shape().to_vec(), out)
}

fn checked_moe(
    token_reprs: &Tensor,
    weights: &MoeWeights,
    k: usize,
    dispatch: Dispatch,
) -> Result<(Vec<f64>, MoeTape)> {
    let shape = token_reprs.shape();
    let d = weights.gate.shape()[0];
    if shape.len() != 2 || shape[1] != d {
        return Err(Error::Dimension(format!(
            "token matrix {shape:?} does not match model width {d}"
        )));
    }
    if weights.experts.is_empty() || weights.gate.shape()[1] != weights.experts.len() {
        return Err(Error::Dimension(format!(
            "gate {:?} for {} experts",
            weights.gate.shape(),
            weights.experts.len()
        )));
    }
    let (out, tape) = moe_forward(token_reprs.data(), d, weights, k, dispatch)?;
    crate::math::ensure_finite(&out, "mixture-of-experts output")?;
    Ok((out, tape))
}

/// Dense feed-forward block on `T × d` representations.
pub fn ffn_layer_forward(token_reprs: &Tensor, weights: &FfnWeights) -> Result<Tensor> {
    let d = weights.w_in.shape()[0];
    if token_reprs.shape().len() != 2 || token_reprs.shape()[1] != d {
        return Err(Error::Dimension(format!(
            "token matrix {:?} does not match model width {d}",
            token_reprs.shape()
        )));
    }
    let (out, _) = ffn_forward(token_reprs.data(), d, weights);
    Tensor::new(token_reprs.shape().to_vec(), out)
}
