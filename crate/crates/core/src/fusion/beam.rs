use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::source::{floor, PosteriorSource, SourceCursor};
use crate::error::{Error, Result};
use crate::model::{LmState, MoeLm};
use crate::tokenizer::{TokenSeq, BOS, EOS, PAD};

/// Largest number of sequences [`exhaustive_oracle`] will enumerate.
pub const ORACLE_LIMIT: u128 = 1_000_000;

/// Sequence-level fused score; per-token scores add up to the same value.
pub fn fuse(e2e_lp: f64, lm_lp: f64, lambda: f64) -> f64 {
    e2e_lp + lambda * lm_lp
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub lambda: f64,
    pub beam_size: usize,
    /// Most non-EOS tokens per hypothesis.
    pub max_len: usize,
    pub n_best: usize,
    pub length_normalization: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            lambda: 0.0,
            beam_size: 8,
            max_len: 32,
            n_best: 1,
            length_normalization: false,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!(
                "lambda must be finite and >= 0, got {}",
                self.lambda
            )));
        }
        if self.beam_size == 0 {
            return Err(Error::Config("beam_size must be at least 1".into()));
        }
        if self.n_best == 0 || self.n_best > self.beam_size {
            return Err(Error::Config(format!(
                "n_best must be in 1..={}, got {}",
                self.beam_size, self.n_best
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Hypothesis {
    /// Emitted tokens; a finished hypothesis ends with EOS.
    pub tokens: TokenSeq,
    pub e2e_logprob: f64,
    pub lm_logprob: f64,
    pub combined: f64,
    pub finished: bool,
    /// LM cache after the last non-EOS token, when an LM was used.
    pub lm_state: Option<LmState>,
}

impl Hypothesis {
    /// Tokens without the closing EOS.
    pub fn words(&self) -> &[u32] {
        let ids = &self.tokens.ids;
        match ids.last() {
            Some(&EOS) => &ids[..ids.len() - 1],
            _ => ids,
        }
    }

    fn ranking_score(&self, normalize: bool) -> f64 {
        if normalize {
            self.combined / self.tokens.len().max(1) as f64
        } else {
            self.combined
        }
    }
}

/// `utt_id<TAB>text<TAB>e2e_lp<TAB>lm_lp<TAB>combined`
pub fn format_decode_line(utt_id: &str, text: &str, hyp: &Hypothesis) -> String {
    format!(
        "{utt_id}\t{text}\t{:.6}\t{:.6}\t{:.6}",
        hyp.e2e_logprob, hyp.lm_logprob, hyp.combined
    )
}

struct Live {
    tokens: Vec<u32>,
    e2e: f64,
    lm: f64,
    cursor: SourceCursor,
    e2e_next: Vec<f64>,
    lm_state: Option<LmState>,
    lm_next: Option<Vec<f64>>,
}

impl Live {
    fn scores(&self, token: u32, lambda: f64) -> (f64, f64, f64) {
        let e2e = self.e2e + self.e2e_next[token as usize];
        let lm = self.lm + self.lm_next.as_ref().map_or(0.0, |d| d[token as usize]);
        (e2e, lm, fuse(e2e, lm, lambda))
    }

    fn finish(&self, lambda: f64) -> Hypothesis {
        let (e2e, lm, combined) = self.scores(EOS, lambda);
        let mut ids = self.tokens.clone();
        ids.push(EOS);
        Hypothesis {
            tokens: TokenSeq::new(ids),
            e2e_logprob: e2e,
            lm_logprob: lm,
            combined,
            finished: true,
            lm_state: self.lm_state.clone(),
        }
    }
}

#[derive(Clone, Copy)]
struct Candidate {
    parent: usize,
    token: u32,
    e2e: f64,
    lm: f64,
    combined: f64,
}

fn emittable(vocab_size: usize) -> impl Iterator<Item = u32> + Clone {
    (0..vocab_size as u32).filter(|&t| t != PAD && t != BOS && t != EOS)
}

fn check_sources(source: &PosteriorSource, lm: Option<&MoeLm>) -> Result<usize> {
    let v = source.vocab_size();
    if v <= EOS as usize {
        return Err(Error::Config(format!("vocabulary of {v} tokens has no room for words")));
    }
    if let Some(lm) = lm {
        source.check_vocab(lm.config.vocab_size)?;
    }
    Ok(v)
}

fn effective_max_len(source: &PosteriorSource, lm: Option<&MoeLm>, max_len: usize) -> usize {
    let mut eff = max_len.min(source.max_tokens());
    if let Some(lm) = lm {
        eff = eff.min(lm.config.max_seq_len - 1);
    }
    eff
}

fn root(source: &PosteriorSource, lm: Option<&MoeLm>) -> Result<Live> {
    let (cursor, e2e_next) = source.start()?;
    let (lm_state, lm_next) = match lm {
        Some(lm) => {
            let mut state = lm.start_state();
            let dist = lm.advance(&mut state, BOS)?;
            (Some(state), Some(dist))
        }
        None => (None, None),
    };
    Ok(Live {
        tokens: Vec::new(),
        e2e: 0.0,
        lm: 0.0,
        cursor,
        e2e_next,
        lm_state,
        lm_next,
    })
}

fn extend(
    source: &PosteriorSource,
    lm: Option<&MoeLm>,
    parent: &Live,
    token: u32,
    e2e: f64,
    lm_lp: f64,
) -> Result<Live> {
    let step = parent.tokens.len();
    let (cursor, e2e_next) = source.step(&parent.cursor, token, step)?;
    let (lm_state, lm_next) = match (lm, &parent.lm_state) {
        (Some(lm), Some(state)) => {
            let (s, d) = lm.lm_score_step(state, token)?;
            (Some(s), Some(floor(d)))
        }
        _ => (None, None),
    };
    let mut tokens = parent.tokens.clone();
    tokens.push(token);
    Ok(Live {
        tokens,
        e2e,
        lm: lm_lp,
        cursor,
        e2e_next,
        lm_state,
        lm_next,
    })
}

fn by_score_then_tokens(a: &Hypothesis, b: &Hypothesis, normalize: bool) -> Ordering {
    b.ranking_score(normalize)
        .total_cmp(&a.ranking_score(normalize))
        .then_with(|| a.tokens.ids.cmp(&b.tokens.ids))
}

/// Beam search with the LM score added at every token.
///
/// Each step extends every live hypothesis by every word token and keeps the
/// `beam_size` best extensions (ties go to the smaller token sequence). The
/// EOS extension of every live hypothesis enters the finished pool. Search
/// ends when no live hypothesis remains or the length limit is reached.
pub fn beam_search_fusion(source: &PosteriorSource, lm: Option<&MoeLm>, cfg: &FusionConfig) -> Result<Vec<Hypothesis>> {
    cfg.validate()?;
    let v = check_sources(source, lm)?;
    let max_len = effective_max_len(source, lm, cfg.max_len);
    let lambda = cfg.lambda;
    // Upper bound on what one more token can add to any score.
    let max_gain = match source {
        PosteriorSource::Lattice(l) => l.frames().data().iter().fold(0.0f64, |m, &x| m.max(x)),
        PosteriorSource::Model(_) => 0.0,
    };

    let mut live = vec![root(source, lm)?];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for step in 0..=max_len {
        finished.extend(live.iter().map(|h| h.finish(lambda)));
        if step == max_len {
            break;
        }
        if !cfg.length_normalization && finished.len() >= cfg.n_best {
            finished.sort_by(|a, b| by_score_then_tokens(a, b, false));
            let kth = finished[cfg.n_best - 1].combined;
            let best_live = live.iter().map(|h| fuse(h.e2e, h.lm, lambda)).fold(f64::MIN, f64::max);
            if kth > best_live + (max_len - step) as f64 * max_gain * (1.0 + lambda) {
                break;
            }
        }

        let mut candidates: Vec<Candidate> = live
            .par_iter()
            .enumerate()
            .flat_map_iter(|(parent, h)| {
                emittable(v).map(move |token| {
                    let (e2e, lm, combined) = h.scores(token, lambda);
                    Candidate {
                        parent,
                        token,
                        e2e,
                        lm,
                        combined,
                    }
                })
            })
            .collect();
        let order = |a: &Candidate, b: &Candidate| {
            b.combined
                .total_cmp(&a.combined)
                .then_with(|| live[a.parent].tokens.cmp(&live[b.parent].tokens))
                .then_with(|| a.token.cmp(&b.token))
        };
        if candidates.len() > cfg.beam_size {
            candidates.select_nth_unstable_by(cfg.beam_size - 1, order);
            candidates.truncate(cfg.beam_size);
        }
        candidates.sort_by(order);
        live = candidates
            .par_iter()
            .map(|c| extend(source, lm, &live[c.parent], c.token, c.e2e, c.lm))
            .collect::<Result<_>>()?;
    }

    finished.sort_by(|a, b| by_score_then_tokens(a, b, cfg.length_normalization));
    finished.truncate(cfg.n_best);
    Ok(finished)
}

/// Number of EOS-terminated sequences with at most `max_len` words drawn
/// from `words` choices, saturating.
fn sequence_count(words: u128, max_len: usize) -> u128 {
    let mut total: u128 = 0;
    let mut layer: u128 = 1;
    for _ in 0..=max_len {
        total = total.saturating_add(layer);
        layer = layer.saturating_mul(words);
    }
    total
}

/// The exact maximizer of the fused score over every EOS-terminated
/// sequence of at most `max_len` words. Ties go to the smaller sequence.
pub fn exhaustive_oracle(
    source: &PosteriorSource,
    lm: Option<&MoeLm>,
    lambda: f64,
    max_len: usize,
) -> Result<Hypothesis> {
    FusionConfig {
        lambda,
        ..Default::default()
    }
    .validate()?;
    let v = check_sources(source, lm)?;
    let max_len = effective_max_len(source, lm, max_len);
    let size = sequence_count(emittable(v).count() as u128, max_len);
    if size > ORACLE_LIMIT {
        return Err(Error::SearchTooLarge {
            size,
            limit: ORACLE_LIMIT,
        });
    }

    fn visit(
        source: &PosteriorSource,
        lm: Option<&MoeLm>,
        lambda: f64,
        max_len: usize,
        v: usize,
        node: &Live,
        best: &mut Option<Hypothesis>,
    ) -> Result<()> {
        let done = node.finish(lambda);
        let better = best
            .as_ref()
            .is_none_or(|b| by_score_then_tokens(&done, b, false) == Ordering::Less);
        if better {
            *best = Some(done);
        }
        if node.tokens.len() == max_len {
            return Ok(());
        }
        for token in emittable(v) {
            let (e2e, lm_lp, _) = node.scores(token, lambda);
            let child = extend(source, lm, node, token, e2e, lm_lp)?;
            visit(source, lm, lambda, max_len, v, &child, best)?;
        }
        Ok(())
    }

    let mut best = None;
    visit(source, lm, lambda, max_len, v, &root(source, lm)?, &mut best)?;
    Ok(best.expect("the empty sequence is always visited"))
}
