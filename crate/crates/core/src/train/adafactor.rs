//! Adafactor with factored second moments and update clipping.
//!
//! For a matrix gradient `G` (rows × cols, trailing dims flattened) the
//! optimizer keeps only row and column means of `G² + ε₁`:
//!
//! ```text
//! R ← ρ·R + (1−ρ)·rowmean(G² + ε₁)
//! C ← ρ·C + (1−ρ)·colmean(G² + ε₁)
//! V̂ = R Cᵀ / mean(R)
//! U = G / √V̂,   Û = U / max(1, RMS(U)/d)
//! X ← X − α_t·Û
//! ```
//!
//! with `ρ_t = min(β₂, 1 − t^(−c))`. Vectors keep a full second moment. With
//! `β₁ = 0` no first-moment buffer exists.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{ensure_finite, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum LrSchedule {
    Constant(f64),
    /// Linear warmup to `peak`, then `peak·√(warmup/t)`.
    InverseSqrt {
        peak: f64,
        warmup: usize,
    },
}

impl LrSchedule {
    pub fn at(&self, step: usize) -> f64 {
        match *self {
            LrSchedule::Constant(lr) => lr,
            LrSchedule::InverseSqrt { peak, warmup } => {
                let t = step.max(1) as f64;
                if warmup == 0 {
                    return peak / t.sqrt();
                }
                let w = warmup as f64;
                peak * (t / w).min((w / t).sqrt())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdafactorHyper {
    pub beta1: f64,
    pub beta2: f64,
    /// Exponent `c` of the decay schedule `1 − t^(−c)`.
    pub decay_exponent: f64,
    pub clip_threshold: f64,
    pub factored: bool,
    pub epsilon1: f64,
    pub learning_rate: LrSchedule,
}

impl Default for AdafactorHyper {
    fn default() -> Self {
        AdafactorHyper {
            beta1: 0.0,
            beta2: 0.99,
            decay_exponent: 0.8,
            clip_threshold: 1.0,
            factored: true,
            epsilon1: 1e-30,
            learning_rate: LrSchedule::InverseSqrt {
                peak: 0.01,
                warmup: 1000,
            },
        }
    }
}

impl AdafactorHyper {
    /// Second-moment decay at step `t ≥ 1`.
    pub fn decay(&self, t: usize) -> f64 {
        (1.0 - (t as f64).powf(-self.decay_exponent)).min(self.beta2)
    }

    fn validate(&self) -> Result<()> {
        if self.clip_threshold.is_nan() || self.clip_threshold <= 0.0 {
            return Err(Error::Config("clip_threshold must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..=1.0).contains(&self.beta2) {
            return Err(Error::Config("beta1 must be in [0, 1), beta2 in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
enum SecondMoment {
    Factored { row: Vec<f64>, col: Vec<f64> },
    Full(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
struct SlotState {
    rows: usize,
    cols: usize,
    second: SecondMoment,
    momentum: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adafactor {
    hyper: AdafactorHyper,
    slots: Vec<SlotState>,
}

impl Adafactor {
    /// Allocates optimizer state for parameters of the given shapes.
    pub fn new(hyper: AdafactorHyper, shapes: &[Vec<usize>]) -> Result<Self> {
        hyper.validate()?;
        let slots = shapes
            .iter()
            .map(|shape| {
                let rows = shape.first().copied().unwrap_or(1);
                let n: usize = shape.iter().product();
                let cols = n / rows.max(1);
                let second = if hyper.factored && shape.len() >= 2 {
                    SecondMoment::Factored {
                        row: vec![0.0; rows],
                        col: vec![0.0; cols],
                    }
                } else {
                    SecondMoment::Full(vec![0.0; n])
                };
                SlotState {
                    rows,
                    cols,
                    second,
                    momentum: (hyper.beta1 > 0.0).then(|| vec![0.0; n]),
                }
            })
            .collect();
        Ok(Adafactor { hyper, slots })
    }

    pub fn hyper(&self) -> &AdafactorHyper {
        &self.hyper
    }

    /// Number of second-moment values held for parameter `i`.
    pub fn accumulator_len(&self, i: usize) -> usize {
        match &self.slots[i].second {
            SecondMoment::Factored { row, col } => row.len() + col.len(),
            SecondMoment::Full(v) => v.len(),
        }
    }

    pub fn has_momentum(&self) -> bool {
        self.slots.iter().any(|s| s.momentum.is_some())
    }

    /// Row and column accumulators (or the full one as `row`) of parameter `i`.
    pub fn accumulators(&self, i: usize) -> (&[f64], &[f64]) {
        match &self.slots[i].second {
            SecondMoment::Factored { row, col } => (row, col),
            SecondMoment::Full(v) => (v, &[]),
        }
    }

    /// One update at step `t ≥ 1`. Nothing is modified if any gradient is
    /// non-finite.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor], t: usize) -> Result<()> {
        if t == 0 {
            return Err(Error::Argument("optimizer steps start at 1".into()));
        }
        if params.len() != self.slots.len() || grads.len() != self.slots.len() {
            return Err(Error::Dimension(format!(
                "{} parameters and {} gradients for {} optimizer slots",
                params.len(),
                grads.len(),
                self.slots.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.len() != self.slots[i].rows * self.slots[i].cols {
                return Err(Error::Dimension(format!(
                    "parameter {i} has shape {:?}, gradient {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
            ensure_finite(g.data(), &format!("gradient of parameter {i}"))?;
        }

        let rho = self.hyper.decay(t);
        let lr = self.hyper.learning_rate.at(t);
        let (eps1, clip, beta1) = (self.hyper.epsilon1, self.hyper.clip_threshold, self.hyper.beta1);
        for ((param, grad), slot) in params.iter_mut().zip(grads).zip(&mut self.slots) {
            let g = grad.data();
            let (rows, cols) = (slot.rows, slot.cols);
            let mut update: Vec<f64> = match &mut slot.second {
                SecondMoment::Factored { row, col } => {
                    for r in 0..rows {
                        let mean = g[r * cols..(r + 1) * cols].iter().map(|x| x * x + eps1).sum::<f64>() / cols as f64;
                        row[r] = rho * row[r] + (1.0 - rho) * mean;
                    }
                    for c in 0..cols {
                        let mean = (0..rows).map(|r| g[r * cols + c].powi(2) + eps1).sum::<f64>() / rows as f64;
                        col[c] = rho * col[c] + (1.0 - rho) * mean;
                    }
                    let row_mean = row.iter().sum::<f64>() / rows as f64;
                    (0..rows * cols)
                        .map(|i| {
                            let v = row[i / cols] * col[i % cols] / row_mean;
                            g[i] / v.sqrt()
                        })
                        .collect()
                }
                SecondMoment::Full(v) => v
                    .iter_mut()
                    .zip(g)
                    .map(|(v, &x)| {
                        *v = rho * *v + (1.0 - rho) * (x * x + eps1);
                        x / v.sqrt()
                    })
                    .collect(),
            };
            let rms = (update.iter().map(|u| u * u).sum::<f64>() / update.len() as f64).sqrt();
            let denom = (rms / clip).max(1.0);
            for u in &mut update {
                *u /= denom;
            }
            if let Some(m) = &mut slot.momentum {
                for (mi, u) in m.iter_mut().zip(update.iter_mut()) {
                    *mi = beta1 * *mi + (1.0 - beta1) * *u;
                    *u = *mi;
                }
            }
            for (x, u) in param.data_mut().iter_mut().zip(&update) {
                *x -= lr * u;
            }
        }
        Ok(())
    }
}
