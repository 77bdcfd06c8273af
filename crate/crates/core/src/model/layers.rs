//! Forward and backward passes of the building blocks. Activations are flat
//! row-major `rows × width` buffers; each forward returns a tape holding what
//! its backward needs.

use super::weights::{AttentionWeights, FfnWeights, NormWeights};
use crate::math::{dot, gemm, gemm_nt, gemm_tn, softmax_in_place};

pub(crate) const NORM_EPS: f64 = 1e-5;

pub(crate) struct NormTape {
    normalized: Vec<f64>,
    inv_std: Vec<f64>,
}

pub(crate) fn layer_norm(x: &[f64], d: usize, w: &NormWeights) -> (Vec<f64>, NormTape) {
    let rows = x.len() / d;
    let (gain, bias) = (w.gain.data(), w.bias.data());
    let mut out = vec![0.0; x.len()];
    let mut normalized = vec![0.0; x.len()];
    let mut inv_std = vec![0.0; rows];
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let mean = xr.iter().sum::<f64>() / d as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + NORM_EPS).sqrt();
        inv_std[r] = is;
        for i in 0..d {
            let n = (xr[i] - mean) * is;
            normalized[r * d + i] = n;
            out[r * d + i] = n * gain[i] + bias[i];
        }
    }
    (out, NormTape { normalized, inv_std })
}

pub(crate) fn layer_norm_backward(
    dy: &[f64],
    d: usize,
    tape: &NormTape,
    w: &NormWeights,
    grad: &mut NormWeights,
) -> Vec<f64> {
    let rows = dy.len() / d;
    let gain = w.gain.data();
    let mut dx = vec![0.0; dy.len()];
    for r in 0..rows {
        let dyr = &dy[r * d..(r + 1) * d];
        let nr = &tape.normalized[r * d..(r + 1) * d];
        let mut dn = vec![0.0; d];
        for i in 0..d {
            grad.gain.data_mut()[i] += dyr[i] * nr[i];
            grad.bias.data_mut()[i] += dyr[i];
            dn[i] = dyr[i] * gain[i];
        }
        let mean_dn = dn.iter().sum::<f64>() / d as f64;
        let mean_dn_n = dot(&dn, nr) / d as f64;
        for i in 0..d {
            dx[r * d + i] = tape.inv_std[r] * (dn[i] - mean_dn - nr[i] * mean_dn_n);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh approximation of GELU.
pub(crate) fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + (GELU_C * (u + 0.044715 * u * u * u)).tanh())
}

pub(crate) fn gelu_grad(u: f64) -> f64 {
    let inner = GELU_C * (u + 0.044715 * u * u * u);
    let t = inner.tanh();
    let dinner = GELU_C * (1.0 + 3.0 * 0.044715 * u * u);
    0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * dinner
}

pub(crate) struct FfnTape {
    input: Vec<f64>,
    pre: Vec<f64>,
    act: Vec<f64>,
}

pub(crate) fn ffn_forward(x: &[f64], d: usize, w: &FfnWeights) -> (Vec<f64>, FfnTape) {
    let rows = x.len() / d;
    let f = w.b_in.len();
    let mut pre = vec![0.0; rows * f];
    for r in 0..rows {
        pre[r * f..(r + 1) * f].copy_from_slice(w.b_in.data());
    }
    gemm(x, w.w_in.data(), rows, d, f, &mut pre);
    let act: Vec<f64> = pre.iter().map(|&u| gelu(u)).collect();
    let mut out = vec![0.0; rows * d];
    for r in 0..rows {
        out[r * d..(r + 1) * d].copy_from_slice(w.b_out.data());
    }
    gemm(&act, w.w_out.data(), rows, f, d, &mut out);
    (
        out,
        FfnTape {
            input: x.to_vec(),
            pre,
            act,
        },
    )
}

pub(crate) fn ffn_backward(dy: &[f64], d: usize, tape: &FfnTape, w: &FfnWeights, grad: &mut FfnWeights) -> Vec<f64> {
    let rows = dy.len() / d;
    let f = w.b_in.len();
    gemm_tn(&tape.act, dy, rows, f, d, grad.w_out.data_mut());
    for r in 0..rows {
        for (g, v) in grad.b_out.data_mut().iter_mut().zip(&dy[r * d..(r + 1) * d]) {
            *g += v;
        }
    }
    let mut dpre = vec![0.0; rows * f];
    gemm_nt(dy, w.w_out.data(), rows, d, f, &mut dpre);
    for (g, &u) in dpre.iter_mut().zip(&tape.pre) {
        *g *= gelu_grad(u);
    }
    gemm_tn(&tape.input, &dpre, rows, d, f, grad.w_in.data_mut());
    for r in 0..rows {
        for (g, v) in grad.b_in.data_mut().iter_mut().zip(&dpre[r * f..(r + 1) * f]) {
            *g += v;
        }
    }
    let mut dx = vec![0.0; rows * d];
    gemm_nt(&dpre, w.w_in.data(), rows, f, d, &mut dx);
    dx
}

/// Shape of the attention computation.
#[derive(Clone, Copy)]
pub(crate) struct AttnShape {
    pub model_dim: usize,
    pub num_heads: usize,
    pub head_dim: usize,
}

impl AttnShape {
    fn width(&self) -> usize {
        self.num_heads * self.head_dim
    }
}

pub(crate) struct AttnTape {
    input: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// `heads × T × T`, zero where masked.
    probs: Vec<f64>,
    ctx: Vec<f64>,
}

/// Position `i` may attend to `j` when `j ≤ i` and both share a segment.
fn visible(segments: &[u32], i: usize, j: usize) -> bool {
    j <= i && segments[i] == segments[j]
}

pub(crate) fn attention_forward(
    x: &[f64],
    segments: &[u32],
    shape: AttnShape,
    w: &AttentionWeights,
) -> (Vec<f64>, AttnTape) {
    let (d, a, hd) = (shape.model_dim, shape.width(), shape.head_dim);
    let t = segments.len();
    let project = |m: &crate::math::Tensor| {
        let mut out = vec![0.0; t * a];
        gemm(x, m.data(), t, d, a, &mut out);
        out
    };
    let (q, k, v) = (project(&w.query), project(&w.key), project(&w.value));
    let scale = 1.0 / (hd as f64).sqrt();
    let mut probs = vec![0.0; shape.num_heads * t * t];
    let mut ctx = vec![0.0; t * a];
    let mut scores = Vec::with_capacity(t);
    for h in 0..shape.num_heads {
        let off = h * hd;
        for i in 0..t {
            let qi = &q[i * a + off..i * a + off + hd];
            scores.clear();
            let keys: Vec<usize> = (0..=i).filter(|&j| visible(segments, i, j)).collect();
            scores.extend(keys.iter().map(|&j| dot(qi, &k[j * a + off..j * a + off + hd]) * scale));
            softmax_in_place(&mut scores);
            let prow = &mut probs[(h * t + i) * t..(h * t + i + 1) * t];
            let crow = &mut ctx[i * a + off..i * a + off + hd];
            for (&j, &p) in keys.iter().zip(&scores) {
                prow[j] = p;
                for (c, vv) in crow.iter_mut().zip(&v[j * a + off..j * a + off + hd]) {
                    *c += p * vv;
                }
            }
        }
    }
    let mut out = vec![0.0; t * d];
    gemm(&ctx, w.output.data(), t, a, d, &mut out);
    (
        out,
        AttnTape {
            input: x.to_vec(),
            q,
            k,
            v,
            probs,
            ctx,
        },
    )
}

pub(crate) fn attention_backward(
    dy: &[f64],
    segments: &[u32],
    shape: AttnShape,
    tape: &AttnTape,
    w: &AttentionWeights,
    grad: &mut AttentionWeights,
) -> Vec<f64> {
    let (d, a, hd) = (shape.model_dim, shape.width(), shape.head_dim);
    let t = segments.len();
    gemm_tn(&tape.ctx, dy, t, a, d, grad.output.data_mut());
    let mut dctx = vec![0.0; t * a];
    gemm_nt(dy, w.output.data(), t, d, a, &mut dctx);

    let scale = 1.0 / (hd as f64).sqrt();
    let mut dq = vec![0.0; t * a];
    let mut dk = vec![0.0; t * a];
    let mut dv = vec![0.0; t * a];
    let mut dp = vec![0.0; t];
    for h in 0..shape.num_heads {
        let off = h * hd;
        for i in 0..t {
            let prow = &tape.probs[(h * t + i) * t..(h * t + i + 1) * t];
            let dci = &dctx[i * a + off..i * a + off + hd];
            let mut weighted = 0.0;
            for j in 0..=i {
                if !visible(segments, i, j) {
                    dp[j] = 0.0;
                    continue;
                }
                let vj = &tape.v[j * a + off..j * a + off + hd];
                dp[j] = dot(dci, vj);
                weighted += prow[j] * dp[j];
                for (g, c) in dv[j * a + off..j * a + off + hd].iter_mut().zip(dci) {
                    *g += prow[j] * c;
                }
            }
            for j in 0..=i {
                if !visible(segments, i, j) {
                    continue;
                }
                let ds = prow[j] * (dp[j] - weighted) * scale;
                if ds == 0.0 {
                    continue;
                }
                for x in 0..hd {
                    dq[i * a + off + x] += ds * tape.k[j * a + off + x];
                    dk[j * a + off + x] += ds * tape.q[i * a + off + x];
                }
            }
        }
    }

    let mut dx = vec![0.0; t * d];
    for (dproj, m, g) in [
        (&dq, &w.query, &mut grad.query),
        (&dk, &w.key, &mut grad.key),
        (&dv, &w.value, &mut grad.value),
    ] {
        gemm_tn(&tape.input, dproj, t, d, a, g.data_mut());
        gemm_nt(dproj, m.data(), t, a, d, &mut dx);
    }
    dx
}

/// Fixed sinusoidal encoding added at the input.
pub(crate) fn positional_encoding(position: usize, d: usize, out: &mut [f64]) {
    for (i, o) in out[..d].iter_mut().enumerate() {
        let pair = (i / 2) as f64;
        let angle = position as f64 / 10_000f64.powf(2.0 * pair / d as f64);
        *o += if i % 2 == 0 { angle.sin() } else { angle.cos() };
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_derivative_matches_difference() {
        for &u in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let fd = (gelu(u + 1e-6) - gelu(u - 1e-6)) / 2e-6;
            assert!((fd - gelu_grad(u)).abs() < 1e-8);
        }
    }

    #[test]
    fn positional_encoding_at_zero() {
        let mut v = vec![0.0; 4];
        positional_encoding(0, 4, &mut v);
        assert_eq!(v, vec![0.0, 1.0, 0.0, 1.0]);
    }
}
