use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::wer::{wer_text, WerBreakdown};
use crate::error::{Error, IoContext, Result};

/// One line of a reference or hypothesis file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transcript {
    pub utt_id: String,
    pub locale: String,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoredUtterance {
    pub utt_id: String,
    pub locale: String,
    pub breakdown: WerBreakdown,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LangEntry {
    pub utterances: usize,
    pub breakdown: WerBreakdown,
    pub wer: f64,
    pub baseline: Option<WerBreakdown>,
    pub baseline_wer: Option<f64>,
    pub werr: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LangReport {
    pub languages: BTreeMap<String, LangEntry>,
    /// Unweighted mean of per-language WERs.
    pub macro_wer: f64,
    /// Pooled over every utterance of every language.
    pub micro_wer: f64,
    pub baseline_name: Option<String>,
    pub baseline_macro_wer: Option<f64>,
    pub baseline_micro_wer: Option<f64>,
    pub improved: usize,
    pub tied: usize,
    pub regressed: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
}

/// Relative WER reduction `(baseline − system) / baseline`; negative means
/// the system is worse.
pub fn werr(baseline_wer: f64, system_wer: f64) -> Result<f64> {
    if baseline_wer.is_nan() || baseline_wer <= 0.0 || !system_wer.is_finite() || !baseline_wer.is_finite() {
        return Err(Error::Argument(format!(
            "werr needs a positive baseline, got ({baseline_wer}, {system_wer})"
        )));
    }
    Ok((baseline_wer - system_wer) / baseline_wer)
}

fn pool(utts: &[ScoredUtterance]) -> BTreeMap<String, (usize, WerBreakdown)> {
    let mut by_locale: BTreeMap<String, (usize, WerBreakdown)> = BTreeMap::new();
    for u in utts {
        let entry = by_locale.entry(u.locale.clone()).or_default();
        entry.0 += 1;
        entry.1 += u.breakdown;
    }
    by_locale
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Pools counts per locale and compares against an optional baseline.
/// Locales listed in `locales` that have no utterances are skipped with a
/// warning; an empty list means every locale present in `system`.
pub fn aggregate(
    system: &[ScoredUtterance],
    baseline: Option<(&str, &[ScoredUtterance])>,
    locales: &[String],
) -> LangReport {
    let sys = pool(system);
    let base = baseline.map(|(_, b)| pool(b));
    let wanted: Vec<String> = if locales.is_empty() {
        sys.keys().cloned().collect()
    } else {
        locales.to_vec()
    };

    let mut languages = BTreeMap::new();
    let (mut improved, mut tied, mut regressed) = (0, 0, 0);
    for locale in wanted {
        let Some(&(utterances, breakdown)) = sys.get(&locale) else {
            log::warn!("locale {locale} has no utterances; omitted from the report");
            continue;
        };
        let b = base.as_ref().and_then(|b| b.get(&locale)).map(|&(_, b)| b);
        let wer = breakdown.wer();
        let baseline_wer = b.map(|b| b.wer());
        if let Some(bw) = baseline_wer {
            match wer.total_cmp(&bw) {
                std::cmp::Ordering::Less => improved += 1,
                std::cmp::Ordering::Equal => tied += 1,
                std::cmp::Ordering::Greater => regressed += 1,
            }
        }
        languages.insert(
            locale,
            LangEntry {
                utterances,
                breakdown,
                wer,
                baseline: b,
                baseline_wer,
                werr: baseline_wer.and_then(|bw| werr(bw, wer).ok()),
            },
        );
    }

    let pooled = |f: &dyn Fn(&LangEntry) -> Option<WerBreakdown>| {
        let mut total = WerBreakdown::default();
        for e in languages.values() {
            total += f(e)?;
        }
        Some(total.wer())
    };
    let has_baseline = baseline.is_some() && languages.values().all(|e| e.baseline.is_some());
    LangReport {
        macro_wer: mean(languages.values().map(|e| e.wer)),
        micro_wer: pooled(&|e| Some(e.breakdown)).unwrap_or(0.0),
        baseline_name: baseline.map(|(name, _)| name.to_string()),
        baseline_macro_wer: has_baseline.then(|| mean(languages.values().filter_map(|e| e.baseline_wer))),
        baseline_micro_wer: if has_baseline { pooled(&|e| e.baseline) } else { None },
        improved,
        tied,
        regressed,
        languages,
    }
}

/// `locale,wer,baseline_wer,werr` with locales in lexicographic order.
/// Missing baseline values are left empty.
pub fn report_csv(report: &LangReport) -> String {
    let mut out = String::from("locale,wer,baseline_wer,werr\n");
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    for (locale, e) in &report.languages {
        let _ = writeln!(out, "{locale},{:.6},{},{}", e.wer, opt(e.baseline_wer), opt(e.werr));
    }
    out
}

pub fn emit_report(report: &LangReport, path: &Path, format: ReportFormat) -> Result<()> {
    let body = match format {
        ReportFormat::Csv => report_csv(report),
        ReportFormat::Json => serde_json::to_string_pretty(report)? + "\n",
    };
    fs::write(path, body).at(path)
}

/// Reads `utt_id<TAB>locale<TAB>text` lines. The text may be empty.
pub fn read_transcripts(path: &Path) -> Result<Vec<Transcript>> {
    let text = fs::read_to_string(path).at(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, line)| {
            let mut parts = line.splitn(3, '\t');
            match (parts.next(), parts.next()) {
                (Some(id), Some(locale)) if !id.is_empty() => Ok(Transcript {
                    utt_id: id.to_string(),
                    locale: locale.to_string(),
                    text: parts.next().unwrap_or("").to_string(),
                }),
                _ => Err(Error::Format {
                    kind: "transcript",
                    path: path.to_path_buf(),
                    detail: format!("line {}: expected utt_id<TAB>locale<TAB>text", n + 1),
                }),
            }
        })
        .collect()
}

/// Scores every reference against the hypothesis with the same id. A
/// missing hypothesis counts as empty output.
pub fn score_transcripts(refs: &[Transcript], hyps: &[Transcript]) -> Result<Vec<ScoredUtterance>> {
    let by_id: HashMap<&str, &Transcript> = hyps.iter().map(|h| (h.utt_id.as_str(), h)).collect();
    refs.iter()
        .map(|r| {
            let hyp = match by_id.get(r.utt_id.as_str()) {
                Some(h) => h.text.as_str(),
                None => {
                    log::warn!("no hypothesis for {}; scoring as empty", r.utt_id);
                    ""
                }
            };
            let breakdown =
                wer_text(&r.text, hyp).map_err(|e| Error::Argument(format!("utterance {}: {e}", r.utt_id)))?;
            Ok(ScoredUtterance {
                utt_id: r.utt_id.clone(),
                locale: r.locale.clone(),
                breakdown,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn utt(locale: &str, errors: usize, words: usize) -> ScoredUtterance {
        ScoredUtterance {
            utt_id: format!("{locale}-{errors}-{words}"),
            locale: locale.into(),
            breakdown: WerBreakdown {
                substitutions: errors,
                ref_words: words,
                ..Default::default()
            },
        }
    }

    #[test]
    fn werr_values() {
        assert!((werr(11.3, 10.8).unwrap() - 0.5 / 11.3).abs() < 1e-15);
        assert!((werr(11.7, 10.8).unwrap() - 0.076_923).abs() < 1e-6);
        assert_eq!(werr(5.0, 5.0).unwrap(), 0.0);
        assert!(werr(0.0, 1.0).is_err());
    }

    #[test]
    fn macro_average() {
        let r = aggregate(&[utt("a", 10, 100), utt("b", 6, 100)], None, &[]);
        assert!((r.macro_wer - 0.08).abs() < 1e-15);
        let single = aggregate(&[utt("a", 3, 40)], None, &[]);
        assert_eq!(single.macro_wer, single.languages["a"].wer);
    }

    #[test]
    fn improved_tied_regressed() {
        let base = [utt("x", 10, 100), utt("y", 10, 100), utt("z", 10, 100)];
        let sys = [utt("x", 9, 100), utt("y", 10, 100), utt("z", 11, 100)];
        let r = aggregate(&sys, Some(("base", &base)), &[]);
        assert_eq!((r.improved, r.tied, r.regressed), (1, 1, 1));
        assert!((r.languages["x"].werr.unwrap() - 0.1).abs() < 1e-12);
        assert!((r.baseline_macro_wer.unwrap() - 0.1).abs() < 1e-12);
    }

    #[test]
    fn missing_locale_is_skipped() {
        let r = aggregate(&[utt("a", 1, 10)], None, &["a".into(), "b".into()]);
        assert_eq!(r.languages.len(), 1);
    }

    #[test]
    fn csv_and_json() {
        let empty = aggregate(&[], None, &[]);
        assert_eq!(report_csv(&empty), "locale,wer,baseline_wer,werr\n");
        let r = aggregate(
            &[utt("zz", 1, 10), utt("aa", 2, 10)],
            Some(("b", &[utt("aa", 4, 10)])),
            &[],
        );
        let csv = report_csv(&r);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[1], "aa,0.200000,0.400000,0.500000");
        assert_eq!(lines[2], "zz,0.100000,,");
        let json = serde_json::to_string(&r).unwrap();
        let back: LangReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn transcripts_are_scored_by_id() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ref.tsv");
        fs::write(&path, "u1\ten\ta b c\nu2\tde\tx y\n").unwrap();
        let refs = read_transcripts(&path).unwrap();
        let hyps = vec![Transcript {
            utt_id: "u2".into(),
            locale: "de".into(),
            text: "x z".into(),
        }];
        let scored = score_transcripts(&refs, &hyps).unwrap();
        assert_eq!(scored[0].breakdown.deletions, 3);
        assert_eq!(scored[1].breakdown.substitutions, 1);
        fs::write(&path, "just-one-field\n").unwrap();
        assert!(read_transcripts(&path).is_err());
    }
}
