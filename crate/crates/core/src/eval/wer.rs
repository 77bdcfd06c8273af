use std::ops::AddAssign;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Edit counts from a minimal alignment of hypothesis to reference.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WerBreakdown {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub ref_words: usize,
}

impl WerBreakdown {
    pub fn errors(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }

    /// `(S + D + I) / N`; may exceed 1.
    pub fn wer(&self) -> f64 {
        if self.ref_words == 0 {
            return 0.0;
        }
        self.errors() as f64 / self.ref_words as f64
    }
}

impl AddAssign for WerBreakdown {
    fn add_assign(&mut self, o: Self) {
        self.substitutions += o.substitutions;
        self.deletions += o.deletions;
        self.insertions += o.insertions;
        self.ref_words += o.ref_words;
    }
}

/// Unit-cost Levenshtein alignment. Among minimal alignments the backtrace
/// prefers substitution (or match), then deletion, then insertion.
pub fn wer<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> Result<WerBreakdown> {
    if reference.is_empty() {
        return Err(Error::Argument("reference has no words".into()));
    }
    let (n, m) = (reference.len(), hypothesis.len());
    let w = m + 1;
    let mut cost = vec![0u32; (n + 1) * w];
    for (j, c) in cost[..w].iter_mut().enumerate() {
        *c = j as u32;
    }
    for i in 1..=n {
        cost[i * w] = i as u32;
        for j in 1..=m {
            let diag = cost[(i - 1) * w + j - 1] + u32::from(reference[i - 1] != hypothesis[j - 1]);
            let del = cost[(i - 1) * w + j] + 1;
            let ins = cost[i * w + j - 1] + 1;
            cost[i * w + j] = diag.min(del).min(ins);
        }
    }

    let mut out = WerBreakdown {
        ref_words: n,
        ..Default::default()
    };
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = cost[i * w + j];
        if i > 0 && j > 0 {
            let differs = reference[i - 1] != hypothesis[j - 1];
            if cost[(i - 1) * w + j - 1] + u32::from(differs) == here {
                out.substitutions += usize::from(differs);
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && cost[(i - 1) * w + j] + 1 == here {
            out.deletions += 1;
            i -= 1;
        } else {
            out.insertions += 1;
            j -= 1;
        }
    }
    Ok(out)
}

/// [`wer`] over whitespace-separated words.
pub fn wer_text(reference: &str, hypothesis: &str) -> Result<WerBreakdown> {
    let r: Vec<&str> = reference.split_whitespace().collect();
    let h: Vec<&str> = hypothesis.split_whitespace().collect();
    wer(&r, &h)
}
