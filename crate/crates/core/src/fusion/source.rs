use crate::error::{Error, Result};
use crate::model::{LmState, MoeLm};
use crate::tokenizer::BOS;

use super::lattice::Lattice;

/// Log-probabilities are clamped here so sums stay finite.
pub const LOG_FLOOR: f64 = -1e9;

/// Where the recognizer's per-token posteriors come from.
#[allow(clippy::large_enum_variant)]
#[derive(Clone, Debug)]
pub enum PosteriorSource {
    /// Fixed per-step distributions; the prefix is ignored.
    Lattice(Lattice),
    /// An autoregressive model conditioned on the emitted prefix.
    Model(MoeLm),
}

/// Incremental position of a hypothesis within a source.
#[derive(Clone, Debug)]
pub(crate) enum SourceCursor {
    Lattice,
    Model(LmState),
}

impl PosteriorSource {
    pub fn vocab_size(&self) -> usize {
        match self {
            PosteriorSource::Lattice(l) => l.vocab_size(),
            PosteriorSource::Model(m) => m.config.vocab_size,
        }
    }

    /// Largest number of non-EOS tokens a hypothesis may carry.
    pub fn max_tokens(&self) -> usize {
        match self {
            PosteriorSource::Lattice(l) => l.num_steps() - 1,
            PosteriorSource::Model(m) => m.config.max_seq_len - 1,
        }
    }

    pub fn check_vocab(&self, vocab_size: usize) -> Result<()> {
        if self.vocab_size() != vocab_size {
            return Err(Error::Config(format!(
                "posterior source has {} tokens, expected {vocab_size}",
                self.vocab_size()
            )));
        }
        Ok(())
    }

    /// Distribution over the token emitted at `step` after `prefix`.
    pub fn e2e_step(&self, prefix: &[u32], step: usize) -> Result<Vec<f64>> {
        match self {
            PosteriorSource::Lattice(l) => {
                if step >= l.num_steps() {
                    return Err(Error::Argument(format!(
                        "step {step} beyond lattice of {} steps",
                        l.num_steps()
                    )));
                }
                Ok(l.row(step).to_vec())
            }
            PosteriorSource::Model(m) => {
                if prefix.len() != step {
                    return Err(Error::Argument(format!(
                        "model source at step {step} needs a prefix of that length, got {}",
                        prefix.len()
                    )));
                }
                if prefix.len() >= m.config.max_seq_len {
                    return Err(Error::Argument(format!(
                        "prefix of {} tokens exceeds the model context",
                        prefix.len()
                    )));
                }
                let mut state = m.start_state();
                let mut dist = m.advance(&mut state, BOS)?;
                for &tok in prefix {
                    dist = m.advance(&mut state, tok)?;
                }
                Ok(floor(dist))
            }
        }
    }

    pub(crate) fn start(&self) -> Result<(SourceCursor, Vec<f64>)> {
        match self {
            PosteriorSource::Lattice(l) => Ok((SourceCursor::Lattice, l.row(0).to_vec())),
            PosteriorSource::Model(m) => {
                let mut state = m.start_state();
                let dist = m.advance(&mut state, BOS)?;
                Ok((SourceCursor::Model(state), floor(dist)))
            }
        }
    }

    /// Moves past `token`, returning the distribution for step `step + 1`.
    pub(crate) fn step(&self, cursor: &SourceCursor, token: u32, step: usize) -> Result<(SourceCursor, Vec<f64>)> {
        match (self, cursor) {
            (PosteriorSource::Lattice(l), _) => Ok((SourceCursor::Lattice, l.row(step + 1).to_vec())),
            (PosteriorSource::Model(m), SourceCursor::Model(state)) => {
                let (next, dist) = m.lm_score_step(state, token)?;
                Ok((SourceCursor::Model(next), floor(dist)))
            }
            (PosteriorSource::Model(_), SourceCursor::Lattice) => {
                Err(Error::Argument("cursor does not belong to a model source".into()))
            }
        }
    }
}

pub(crate) fn floor(mut v: Vec<f64>) -> Vec<f64> {
    for x in &mut v {
        *x = x.max(LOG_FLOOR);
    }
    v
}
