use std::fmt::Write as _;
use std::path::PathBuf;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::adafactor::{Adafactor, AdafactorHyper};
use super::pack::pack_batches;
use crate::error::{Error, Result};
use crate::model::{Checkpoint, Dispatch, MoeLm, MoeLmConfig};
use crate::tokenizer::TokenSeq;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub steps: usize,
    pub batch_size: usize,
    pub packing_factor: usize,
    pub seed: u64,
    pub optimizer: AdafactorHyper,
    pub dispatch: Dispatch,
    /// Stop once the mean loss over the last window improves on the window
    /// before it by less than 0.1%.
    pub plateau_window: Option<usize>,
    /// Save `step-N` checkpoints under `checkpoint_dir` every this many steps.
    pub checkpoint_every: Option<usize>,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            steps: 1000,
            batch_size: 8,
            packing_factor: 8,
            seed: 0,
            optimizer: AdafactorHyper::default(),
            dispatch: Dispatch::Sparse,
            plateau_window: Some(500),
            checkpoint_every: None,
            checkpoint_dir: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub cross_entropy: f64,
    pub aux_loss: f64,
    pub tokens: usize,
    pub tokens_per_sec: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<StepRecord>,
    /// Per MoE layer, the routed fraction per expert averaged over steps.
    pub routing: Vec<Vec<f64>>,
    pub truncated_sentences: usize,
    pub stopped_on_plateau: bool,
}

impl TrainLog {
    /// `step,loss,aux_loss,tokens_per_sec`, one line per step.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,loss,aux_loss,tokens_per_sec\n");
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{:.6},{:.6},{:.1}",
                r.step, r.loss, r.aux_loss, r.tokens_per_sec
            );
        }
        out
    }

    /// `layer,expert,fraction` rows of the routing histogram.
    pub fn routing_csv(&self) -> String {
        let mut out = String::from("layer,expert,fraction\n");
        for (l, row) in self.routing.iter().enumerate() {
            for (e, f) in row.iter().enumerate() {
                let _ = writeln!(out, "{l},{e},{f:.6}");
            }
        }
        out
    }

    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }
}

fn plateaued(losses: &[f64], window: usize) -> bool {
    if window == 0 || losses.len() < 2 * window {
        return false;
    }
    let n = losses.len();
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let recent = mean(&losses[n - window..]);
    let before = mean(&losses[n - 2 * window..n - window]);
    (before - recent) < 1e-3 * before.abs()
}

/// Trains a freshly initialized model on `sentences`. Every epoch repacks
/// the data under a new seed derived from `opts.seed`.
pub fn train(sentences: &[TokenSeq], config: MoeLmConfig, opts: &TrainOptions) -> Result<(Checkpoint, TrainLog)> {
    config.validate()?;
    if opts.steps == 0 {
        return Err(Error::Argument("training needs at least one step".into()));
    }
    if let Some(bad) = sentences
        .iter()
        .flat_map(|s| &s.ids)
        .find(|&&id| id as usize >= config.vocab_size)
    {
        return Err(Error::Argument(format!(
            "token id {bad} outside vocabulary of {}",
            config.vocab_size
        )));
    }
    let mut model = MoeLm::new(config, opts.seed)?;
    let shapes: Vec<Vec<usize>> = model
        .weights
        .named_tensors()
        .iter()
        .map(|(_, t)| t.shape().to_vec())
        .collect();
    let mut optimizer = Adafactor::new(opts.optimizer.clone(), &shapes)?;
    let mut log = TrainLog::default();
    let mut routing_sum: Vec<Vec<f64>> = Vec::new();

    let mut epoch = 0u64;
    let mut batches = Vec::new();
    let mut cursor = 0;
    let mut losses = Vec::with_capacity(opts.steps);
    let mut step = 0;
    while step < opts.steps {
        if cursor == batches.len() {
            let packed = pack_batches(
                sentences,
                model.config.max_seq_len,
                opts.packing_factor,
                opts.batch_size,
                opts.seed.wrapping_add(1).wrapping_add(epoch),
            )?;
            if epoch == 0 {
                log.truncated_sentences = packed.truncated;
            }
            batches = packed.batches;
            cursor = 0;
            epoch += 1;
        }
        step += 1;
        let examples = batches[cursor].to_examples(true);
        cursor += 1;

        let started = Instant::now();
        let (loss, grad) = model
            .loss_and_gradient(&examples, opts.dispatch)
            .map_err(|e| divergence(step, e))?;
        if !loss.total.is_finite() {
            return Err(Error::Divergence {
                step,
                detail: format!("loss is {}", loss.total),
            });
        }
        let grads: Vec<_> = grad.named_tensors().into_iter().map(|(_, t)| t).collect();
        let mut params = model.weights.tensors_mut();
        optimizer
            .step(&mut params, &grads, step)
            .map_err(|e| divergence(step, e))?;
        let elapsed = started.elapsed().as_secs_f64().max(1e-9);

        if routing_sum.is_empty() {
            routing_sum = loss.routing.iter().map(|r| vec![0.0; r.len()]).collect();
        }
        for (acc, row) in routing_sum.iter_mut().zip(&loss.routing) {
            for (a, f) in acc.iter_mut().zip(row) {
                *a += f;
            }
        }
        let tokens: usize = examples.iter().map(|e| e.tokens.len()).sum();
        log::debug!("step {step}: loss {:.4} aux {:.4}", loss.total, loss.aux);
        log.records.push(StepRecord {
            step,
            loss: loss.total,
            cross_entropy: loss.cross_entropy,
            aux_loss: loss.aux,
            tokens,
            tokens_per_sec: tokens as f64 / elapsed,
        });
        losses.push(loss.total);

        if let (Some(every), Some(dir)) = (opts.checkpoint_every, &opts.checkpoint_dir) {
            if every > 0 && step % every == 0 {
                Checkpoint::new(model.clone(), step as u64).save(&dir.join(format!("step-{step}")))?;
            }
        }
        if opts.plateau_window.is_some_and(|w| plateaued(&losses, w)) {
            log::info!("loss plateaued at step {step}");
            log.stopped_on_plateau = true;
            break;
        }
    }
    log.routing = routing_sum
        .into_iter()
        .map(|row| row.into_iter().map(|f| f / step as f64).collect())
        .collect();
    Ok((Checkpoint::new(model, step as u64), log))
}

fn divergence(step: usize, e: Error) -> Error {
    match e {
        Error::Numeric(detail) => Error::Divergence { step, detail },
        other => other,
    }
}
