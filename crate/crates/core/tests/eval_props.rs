use moefusion::eval::{aggregate, wer, ScoredUtterance, WerBreakdown};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Textbook edit distance, kept independent of the backtracking scorer.
fn levenshtein(a: &[u8], b: &[u8]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    for i in 1..=a.len() {
        let mut cur = vec![i; b.len() + 1];
        for j in 1..=b.len() {
            let sub = prev[j - 1] + usize::from(a[i - 1] != b[j - 1]);
            cur[j] = sub.min(prev[j] + 1).min(cur[j - 1] + 1);
        }
        prev = cur;
    }
    prev[b.len()]
}

fn words(rng: &mut ChaCha8Rng, max: usize) -> Vec<u8> {
    let n = rng.random_range(0..=max);
    (0..n).map(|_| rng.random_range(0..6u8)).collect()
}

#[test]
fn edit_counts_match_reference_dp() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut checked = 0;
    while checked < 10_000 {
        let r = words(&mut rng, 20);
        if r.is_empty() {
            continue;
        }
        let h = words(&mut rng, 20);
        let b = wer(&r, &h).unwrap();
        assert_eq!(b.errors(), levenshtein(&r, &h), "{r:?} vs {h:?}");
        assert_eq!(b.ref_words, r.len());
        assert_eq!(b.ref_words + b.insertions - b.deletions, h.len());
        checked += 1;
    }
}

proptest! {
    #[test]
    fn zero_wer_iff_equal(r in prop::collection::vec(0u8..4, 1..12), h in prop::collection::vec(0u8..4, 0..12)) {
        let b = wer(&r, &h).unwrap();
        prop_assert_eq!(b.wer() == 0.0, r == h);
    }

    #[test]
    fn shard_merge_is_exact(
        counts in prop::collection::vec((0usize..3, 0usize..5, 1usize..20), 1..40),
        split in 0usize..40,
    ) {
        let utts: Vec<ScoredUtterance> = counts
            .iter()
            .enumerate()
            .map(|(i, &(loc, e, n))| ScoredUtterance {
                utt_id: i.to_string(),
                locale: format!("l{loc}"),
                breakdown: WerBreakdown { substitutions: e.min(n), ref_words: n, ..Default::default() },
            })
            .collect();
        let whole = aggregate(&utts, None, &[]);
        let cut = split.min(utts.len());
        let (a, b) = (aggregate(&utts[..cut], None, &[]), aggregate(&utts[cut..], None, &[]));
        for (locale, entry) in &whole.languages {
            let mut pooled = WerBreakdown::default();
            for shard in [&a, &b] {
                if let Some(e) = shard.languages.get(locale) {
                    pooled += e.breakdown;
                }
            }
            prop_assert_eq!(pooled, entry.breakdown);
            prop_assert_eq!(pooled.wer(), entry.wer);
        }
    }
}
