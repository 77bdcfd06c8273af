//! End-to-end acceptance checks. Each criterion prints one PASS or FAIL line;
//! the process exits non-zero if any fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use moefusion::eval::{aggregate, wer, werr, ScoredUtterance, WerBreakdown};
use moefusion::fusion::{
    beam_search_fusion, exhaustive_oracle, FusionConfig, Hypothesis, Lattice, PosteriorSource, LOG_FLOOR,
};
use moefusion::math::{grad_check, GradCheckOptions, Objective};
use moefusion::model::{
    count_params_flops, dense_mixture_forward, ffn_layer_forward, gate_topk, moe_layer_forward, Dispatch,
    FeedForwardWeights, LmExample, LmWeights,
};
use moefusion::tokenizer::{BOS, EOS, PAD};
use moefusion::train::{train, AdafactorHyper, LrSchedule, TrainOptions};
use moefusion::{MoeLm, MoeLmConfig, Tensor, TokenSeq};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion<'a> = (&'static str, Box<dyn FnOnce() -> Outcome + 'a>);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within_time(start: Instant, limit: Duration) -> Result<(), String> {
    let took = start.elapsed();
    ensure(took < limit, || format!("took {took:.2?}, limit {limit:?}"))
}

fn parameter_accounting() -> Outcome {
    let start = Instant::now();
    let r = count_params_flops(&MoeLmConfig::base_64e());
    let total_err = (r.total_params as f64 - 1.9e9).abs() / 1.9e9;
    let active_err = (r.active_params_per_token as f64 - 145e6).abs() / 145e6;
    within_time(start, Duration::from_secs(1))?;
    ensure(total_err <= 0.15, || {
        format!("total {} is {:.1}% off 1.9B", r.total_params, total_err * 100.0)
    })?;
    ensure(active_err <= 0.20, || {
        format!(
            "active {} is {:.1}% off 145M",
            r.active_params_per_token,
            active_err * 100.0
        )
    })?;
    Ok(format!(
        "total {} ({:.1}% off), active {} ({:.1}% off)",
        r.total_params,
        total_err * 100.0,
        r.active_params_per_token,
        active_err * 100.0
    ))
}

fn compute_parity() -> Outcome {
    let start = Instant::now();
    let reports: Vec<(u64, _)> = [2u64, 8, 64]
        .iter()
        .map(|&e| {
            let cfg = MoeLmConfig {
                num_experts: e as usize,
                ..MoeLmConfig::base_64e()
            };
            (e, count_params_flops(&cfg).flops_per_token)
        })
        .collect();
    within_time(start, Duration::from_secs(1))?;
    let (_, base) = &reports[0];
    for (e, f) in &reports {
        ensure(f.non_gating() == base.non_gating(), || {
            format!(
                "non-gating flops {} at E={e} vs {} at E=2",
                f.non_gating(),
                base.non_gating()
            )
        })?;
        ensure(f.gating * 2 == base.gating * e, || {
            format!("gating {} at E={e} not linear", f.gating)
        })?;
    }
    Ok(format!(
        "non-gating {} flops/token, gating {} per expert",
        base.non_gating(),
        base.gating / 2
    ))
}

fn dense_reduction() -> Outcome {
    let d = 16;
    let cfg = MoeLmConfig {
        num_experts: 2,
        experts_per_token: 2,
        ..MoeLmConfig::tiny(24)
    };
    let weights = LmWeights::init(&cfg, 3).map_err(|e| e.to_string())?;
    let FeedForwardWeights::Moe(w) = &weights.blocks[1].ffn else {
        return Err("layer 1 is not a mixture layer".into());
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = Tensor::new(
        vec![1000, d],
        (0..1000 * d).map(|_| rng.random_range(-2.0..2.0)).collect(),
    )
    .unwrap();
    let sparse = moe_layer_forward(&x, w, 2).unwrap();
    let mixture = dense_mixture_forward(&x, w).unwrap();
    let experts: Vec<Tensor> = w.experts.iter().map(|e| ffn_layer_forward(&x, e).unwrap()).collect();
    let mut worst = 0.0f64;
    for t in 0..1000 {
        let logits: Vec<f64> = (0..2)
            .map(|e| (0..d).map(|i| x.row(t)[i] * w.gate.row(i)[e]).sum())
            .collect();
        let m = logits[0].max(logits[1]);
        let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
        for j in 0..d {
            let dense: f64 = (0..2).map(|e| (logits[e] - m).exp() / z * experts[e].row(t)[j]).sum();
            worst = worst
                .max((sparse.row(t)[j] - dense).abs())
                .max((mixture.row(t)[j] - dense).abs());
        }
    }
    ensure(worst < 1e-6, || format!("layer output deviates by {worst:e}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let data: Vec<TokenSeq> = (0..40)
        .map(|_| TokenSeq::new((0..rng.random_range(1..8)).map(|_| rng.random_range(4..24)).collect()))
        .collect();
    let mut opts = TrainOptions {
        steps: 20,
        batch_size: 4,
        packing_factor: 4,
        optimizer: AdafactorHyper {
            learning_rate: LrSchedule::Constant(0.01),
            ..Default::default()
        },
        plateau_window: None,
        ..Default::default()
    };
    let (_, a) = train(&data, cfg.clone(), &opts).map_err(|e| e.to_string())?;
    opts.dispatch = Dispatch::DenseMixture;
    let (_, b) = train(&data, cfg, &opts).map_err(|e| e.to_string())?;
    let gap = a
        .losses()
        .iter()
        .zip(b.losses())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    ensure(a.records.len() == 20 && gap < 1e-5, || {
        format!("loss curves differ by {gap:e}")
    })?;
    Ok(format!("layer max deviation {worst:.1e}, 20-step loss gap {gap:.1e}"))
}

fn routing_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let d = 8;
    let mut seen = 0;
    for &e in &[2usize, 4, 8, 64] {
        let gate = Tensor::new(vec![d, e], (0..d * e).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        for _ in 0..25_000 {
            let x: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
            let g = gate_topk(&x, &gate, 2).map_err(|e| e.to_string())?;
            let sum: f64 = g.combine_weights.iter().sum();
            ensure(
                g.expert_indices.len() == 2 && g.expert_indices[0] != g.expert_indices[1],
                || format!("experts {:?} at E={e}", g.expert_indices),
            )?;
            ensure((sum - 1.0).abs() < 1e-6, || format!("weights sum to {sum}"))?;
            let again = gate_topk(&x, &gate, 2).unwrap();
            ensure(again.expert_indices == g.expert_indices, || {
                "routing not reproducible".into()
            })?;
            seen += 1;
        }
        let tied = gate_topk(&vec![0.0; d], &gate, 2).unwrap();
        ensure(tied.expert_indices == [0, 1], || {
            format!("tie went to {:?}", tied.expert_indices)
        })?;
    }
    Ok(format!("{seen} tokens routed"))
}

fn random_lattice(words: usize, steps: usize, rng: &mut ChaCha8Rng) -> PosteriorSource {
    let v = 3 + words;
    let rows = (0..steps)
        .map(|_| {
            let mut row: Vec<f64> = (0..v).map(|_| rng.random_range(-3.0..3.0)).collect();
            row[PAD as usize] = f64::NEG_INFINITY;
            row[BOS as usize] = f64::NEG_INFINITY;
            let lse = row.iter().map(|x| x.exp()).sum::<f64>().ln();
            row.iter().map(|x| (x - lse).max(LOG_FLOOR)).collect()
        })
        .collect();
    PosteriorSource::Lattice(Lattice::from_rows(rows).unwrap())
}

fn fusion_correctness() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut emitted: Vec<(f64, Hypothesis)> = Vec::new();
    for i in 0..100 {
        let words = rng.random_range(3..8);
        let source = random_lattice(words, rng.random_range(2..8), &mut rng);
        let lm = MoeLm::new(MoeLmConfig::tiny(3 + words), i).unwrap();
        let cfg = FusionConfig {
            lambda: 0.0,
            n_best: 4,
            ..Default::default()
        };
        let with = beam_search_fusion(&source, Some(&lm), &cfg).map_err(|e| e.to_string())?;
        let without = beam_search_fusion(&source, None, &cfg).map_err(|e| e.to_string())?;
        let toks = |h: &[Hypothesis]| h.iter().map(|x| x.tokens.clone()).collect::<Vec<_>>();
        ensure(toks(&with) == toks(&without), || {
            format!("lambda 0 changed lattice {i}")
        })?;
        emitted.extend(with.into_iter().map(|h| (0.0, h)));
    }
    for i in 0..50 {
        let source = random_lattice(4, 4, &mut rng);
        let lm = MoeLm::new(MoeLmConfig::tiny(7), 1000 + i).unwrap();
        let lambda = rng.random_range(0.1..1.0);
        let cfg = FusionConfig {
            lambda,
            beam_size: 64,
            max_len: 3,
            ..Default::default()
        };
        let best = beam_search_fusion(&source, Some(&lm), &cfg)
            .map_err(|e| e.to_string())?
            .remove(0);
        let oracle = exhaustive_oracle(&source, Some(&lm), lambda, 3).map_err(|e| e.to_string())?;
        ensure(best.tokens == oracle.tokens, || {
            format!("instance {i}: beam {:?}, oracle {:?}", best.tokens, oracle.tokens)
        })?;
        emitted.push((lambda, best));
    }
    for (lambda, h) in &emitted {
        let err = (h.combined - (h.e2e_logprob + lambda * h.lm_logprob)).abs();
        ensure(err < 1e-9, || format!("score decomposition off by {err:e}"))?;
        ensure(h.finished == (h.tokens.ids.last() == Some(&EOS)), || {
            "finished flag inconsistent".into()
        })?;
    }
    within_time(start, Duration::from_secs(60))?;
    Ok(format!(
        "{} hypotheses checked in {:.2?}",
        emitted.len(),
        start.elapsed()
    ))
}

struct LmObjective {
    model: MoeLm,
    batch: Vec<LmExample>,
}

impl Objective for LmObjective {
    fn value(&mut self, params: &[f64]) -> moefusion::Result<f64> {
        self.model.weights.assign_flat(params)?;
        Ok(self.model.loss(&self.batch, Dispatch::Sparse)?.total)
    }

    fn gradient(&mut self, params: &[f64]) -> moefusion::Result<Vec<f64>> {
        self.model.weights.assign_flat(params)?;
        Ok(self.model.loss_and_gradient(&self.batch, Dispatch::Sparse)?.1.flatten())
    }
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let cfg = MoeLmConfig::tiny(12);
    let model = MoeLm::new(cfg, 6).map_err(|e| e.to_string())?;
    let batch = vec![
        LmExample::from_sequence(&[BOS, 4, 7, 5, 9, EOS]),
        LmExample::from_sequence(&[BOS, 11, 3, 6, EOS]),
    ];
    let params = model.weights.flatten();
    let mut obj = LmObjective { model, batch };
    let opts = GradCheckOptions {
        exhaustive_limit: usize::MAX,
        ..Default::default()
    };
    let report = grad_check(&mut obj, &params, &opts).map_err(|e| e.to_string())?;
    within_time(start, Duration::from_secs(120))?;
    ensure(report.max_relative_error < 1e-4, || format!("{report:?}"))?;
    Ok(format!(
        "{} parameters, max relative error {:.2e}, {:.2?}",
        report.checked,
        report.max_relative_error,
        start.elapsed()
    ))
}

fn long_tail_analog(dir: &std::path::Path, took: Duration) -> Outcome {
    ensure(took < Duration::from_secs(600), || format!("pipeline took {took:.2?}"))?;
    let rows = common::sweep_rows(&dir.join("sweep/sweep.csv"));
    let get = |label: &str| rows.iter().find(|(l, _)| l == label).map(|r| r.1);
    let none = get("none").ok_or("no LM-free row")?;
    let zero = get("0").ok_or("no lambda 0 row")?;
    ensure(none == zero, || {
        format!("lambda 0 WER {zero} differs from LM-free {none}")
    })?;
    let better: Vec<&(String, f64)> = rows
        .iter()
        .filter(|(l, w)| !matches!(l.as_str(), "none" | "0") && *w < zero)
        .collect();
    let summary = rows
        .iter()
        .map(|(l, w)| format!("{l}:{w:.4}"))
        .collect::<Vec<_>>()
        .join(" ");
    ensure(!better.is_empty(), || format!("no lambda beats lambda 0 ({summary})"))?;
    Ok(summary)
}

fn levenshtein(a: &[u8], b: &[u8]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    for (i, x) in a.iter().enumerate() {
        let mut cur = vec![i + 1; b.len() + 1];
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = (prev[j] + usize::from(x != y)).min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        prev = cur;
    }
    prev[b.len()]
}

fn wer_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for n in 0..10_000 {
        let r: Vec<u8> = (0..rng.random_range(1..=20)).map(|_| rng.random_range(0..5)).collect();
        let h: Vec<u8> = (0..rng.random_range(0..=20)).map(|_| rng.random_range(0..5)).collect();
        let b = wer(&r, &h).map_err(|e| e.to_string())?;
        let dist = levenshtein(&r, &h);
        ensure(b.errors() == dist && b.ref_words == r.len(), || {
            format!("pair {n}: {b:?} vs distance {dist}")
        })?;
    }
    let utts: Vec<ScoredUtterance> = (0..500)
        .map(|i| {
            let n = rng.random_range(1..15);
            ScoredUtterance {
                utt_id: format!("u{i}"),
                locale: format!("l{}", rng.random_range(0..4)),
                breakdown: WerBreakdown {
                    substitutions: rng.random_range(0..=n),
                    deletions: 0,
                    insertions: rng.random_range(0..3),
                    ref_words: n,
                },
            }
        })
        .collect();
    let whole = aggregate(&utts, None, &[]);
    let shards: Vec<_> = utts.chunks(37).map(|c| aggregate(c, None, &[])).collect();
    for (locale, entry) in &whole.languages {
        let mut pooled = WerBreakdown::default();
        for s in &shards {
            if let Some(e) = s.languages.get(locale) {
                pooled += e.breakdown;
            }
        }
        ensure(pooled == entry.breakdown && pooled.wer() == entry.wer, || {
            format!("shard merge differs for {locale}")
        })?;
    }
    Ok("10000 pairs, shard merge exact".into())
}

fn determinism(a: &std::path::Path, b: &std::path::Path) -> Outcome {
    let (ta, tb) = (common::tree(a), common::tree(b));
    let diff = common::tree_diff(&ta, &tb);
    ensure(diff.is_empty(), || format!("differing files: {diff:?}"))?;
    for must in ["vocab.txt", "lm/checkpoint", "fused/decodes.tsv", "report/report.json"] {
        ensure(ta.keys().any(|k| k.starts_with(must)), || format!("{must} missing"))?;
    }
    Ok(format!("{} files identical", ta.len()))
}

fn werr_arithmetic() -> Outcome {
    let a = werr(11.3, 10.8).map_err(|e| e.to_string())?;
    let b = werr(11.7, 10.8).map_err(|e| e.to_string())?;
    ensure((0.043..=0.045).contains(&a), || format!("werr(11.3, 10.8) = {a}"))?;
    ensure((b * 1000.0).round() == 77.0, || format!("werr(11.7, 10.8) = {b}"))?;
    ensure(werr(5.0, 5.0).unwrap() == 0.0, || "equal inputs".into())?;
    Ok(format!("{:.3}% and {:.3}%", a * 100.0, b * 100.0))
}

fn main() {
    let first = tempfile::tempdir().expect("temp dir");
    let second = tempfile::tempdir().expect("temp dir");
    let start = Instant::now();
    let run_a = common::pipeline(first.path(), 300);
    let took = start.elapsed();
    let run_b = common::pipeline(second.path(), 300);

    let criteria: Vec<Criterion> = vec![
        ("parameter accounting", Box::new(parameter_accounting)),
        ("compute parity", Box::new(compute_parity)),
        ("dense reduction", Box::new(dense_reduction)),
        ("routing invariants", Box::new(routing_invariants)),
        ("fusion correctness", Box::new(fusion_correctness)),
        ("gradient correctness", Box::new(gradient_correctness)),
        (
            "synthetic long-tail",
            Box::new(|| {
                run_a.clone()?;
                long_tail_analog(first.path(), took)
            }),
        ),
        ("WER oracle", Box::new(wer_oracle)),
        (
            "determinism",
            Box::new(|| {
                run_a.clone()?;
                run_b.clone()?;
                determinism(first.path(), second.path())
            }),
        ),
        ("WERR arithmetic", Box::new(werr_arithmetic)),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.into_iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|_| Err("panicked".into()));
        match outcome {
            Ok(detail) => println!("criterion {:2} {name}: PASS ({detail})", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {:2} {name}: FAIL ({detail})", i + 1);
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
