//! Multi-utterance decoding and λ sweeps shared by several subcommands.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use rayon::prelude::*;

use moefusion::eval::{aggregate, score_transcripts, Transcript};
use moefusion::fusion::{beam_search_fusion, format_decode_line, FusionConfig, Hypothesis, Lattice, PosteriorSource};
use moefusion::synth::read_lattice_index;
use moefusion::{MoeLm, Vocab};

pub struct LatticeUtterance {
    pub utt_id: String,
    pub locale: String,
    pub source: PosteriorSource,
}

pub struct Decoded {
    pub utt_id: String,
    pub locale: String,
    pub text: String,
    pub best: Hypothesis,
}

/// Loads every lattice listed in `dir/index.tsv`.
pub fn load_lattice_dir(dir: &Path) -> Result<Vec<LatticeUtterance>> {
    let index = dir.join("index.tsv");
    read_lattice_index(&index)?
        .into_iter()
        .map(|(utt_id, locale, path)| {
            let lattice = Lattice::load(&path).with_context(|| format!("lattice for {utt_id}"))?;
            Ok(LatticeUtterance {
                utt_id,
                locale,
                source: PosteriorSource::Lattice(lattice),
            })
        })
        .collect()
}

pub fn decode_all(
    utts: &[LatticeUtterance],
    vocab: &Vocab,
    lm: Option<&MoeLm>,
    cfg: &FusionConfig,
) -> Result<Vec<Decoded>> {
    utts.par_iter()
        .map(|u| {
            let best = beam_search_fusion(&u.source, lm, cfg)
                .with_context(|| format!("decoding {}", u.utt_id))?
                .into_iter()
                .next()
                .context("beam search returned no hypothesis")?;
            Ok(Decoded {
                utt_id: u.utt_id.clone(),
                locale: u.locale.clone(),
                text: vocab.decode_text(best.words())?,
                best,
            })
        })
        .collect()
}

pub fn hypotheses(decoded: &[Decoded]) -> Vec<Transcript> {
    decoded
        .iter()
        .map(|d| Transcript {
            utt_id: d.utt_id.clone(),
            locale: d.locale.clone(),
            text: d.text.clone(),
        })
        .collect()
}

/// Writes `decodes.tsv` (with scores) and `hyps.tsv` (evaluation input).
pub fn write_decodes(dir: &Path, decoded: &[Decoded]) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut decodes = String::new();
    let mut hyps = String::new();
    for d in decoded {
        decodes.push_str(&format_decode_line(&d.utt_id, &d.text, &d.best));
        decodes.push('\n');
        let _ = writeln!(hyps, "{}\t{}\t{}", d.utt_id, d.locale, d.text);
    }
    fs::write(dir.join("decodes.tsv"), decodes).context("writing decodes.tsv")?;
    fs::write(dir.join("hyps.tsv"), hyps).context("writing hyps.tsv")?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    /// `None` for the decode without any LM.
    pub lambda: Option<f64>,
    /// Pooled over all utterances.
    pub wer: f64,
    pub macro_wer: f64,
}

/// Decodes the whole set once without an LM and once per λ.
pub fn sweep_lambda(
    utts: &[LatticeUtterance],
    refs: &[Transcript],
    vocab: &Vocab,
    lm: &MoeLm,
    lambdas: &[f64],
    base: &FusionConfig,
) -> Result<Vec<SweepRow>> {
    let score = |lm: Option<&MoeLm>, lambda: f64| -> Result<(f64, f64)> {
        let cfg = FusionConfig { lambda, ..base.clone() };
        let decoded = decode_all(utts, vocab, lm, &cfg)?;
        let scored = score_transcripts(refs, &hypotheses(&decoded))?;
        let report = aggregate(&scored, None, &[]);
        Ok((report.micro_wer, report.macro_wer))
    };
    let mut rows = Vec::with_capacity(lambdas.len() + 1);
    let (wer, macro_wer) = score(None, 0.0)?;
    rows.push(SweepRow {
        lambda: None,
        wer,
        macro_wer,
    });
    for &lambda in lambdas {
        let (wer, macro_wer) = score(Some(lm), lambda)?;
        log::info!("lambda {lambda}: wer {wer:.4}");
        rows.push(SweepRow {
            lambda: Some(lambda),
            wer,
            macro_wer,
        });
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("lambda,wer,macro_wer\n");
    for r in rows {
        let label = r.lambda.map_or_else(|| "none".to_string(), |l| format!("{l}"));
        let _ = writeln!(out, "{label},{:.6},{:.6}", r.wer, r.macro_wer);
    }
    out
}
