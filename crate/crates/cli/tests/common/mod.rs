#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

pub fn moefusion(args: &[&str]) -> i32 {
    moefusion_cli::run(std::iter::once("moefusion").chain(args.iter().copied()))
}

fn step(args: &[&str]) -> Result<(), String> {
    match moefusion(args) {
        0 => Ok(()),
        code => Err(format!("`{}` exited with {code}", args.join(" "))),
    }
}

/// Runs the synthetic end-to-end pipeline under `dir`: corpora, vocabulary,
/// lattices, LM, plain and fused decodes, report and lambda sweep.
pub fn pipeline(dir: &Path, lm_steps: usize) -> Result<(), String> {
    let d = |p: &str| dir.join(p).to_str().expect("utf-8 path").to_string();
    let steps = lm_steps.to_string();
    let root = d("");
    step(&["gen-synthetic", "--stage", "corpus", "--output-dir", &root])?;
    step(&[
        "train-tokenizer",
        "--manifest",
        &d("manifest.tsv"),
        "--vocab-size",
        "400",
        "--output-dir",
        &root,
    ])?;
    step(&[
        "gen-synthetic",
        "--stage",
        "lattices",
        "--vocab",
        &d("vocab.txt"),
        "--output-dir",
        &root,
    ])?;
    step(&[
        "train-lm",
        "--manifest",
        &d("manifest.tsv"),
        "--vocab",
        &d("vocab.txt"),
        "--steps",
        &steps,
        "--output-dir",
        &d("lm"),
    ])?;
    step(&[
        "decode",
        "--lattices",
        &d("lattices"),
        "--vocab",
        &d("vocab.txt"),
        "--output-dir",
        &d("base"),
    ])?;
    step(&[
        "decode",
        "--lattices",
        &d("lattices"),
        "--vocab",
        &d("vocab.txt"),
        "--lm",
        &d("lm/checkpoint"),
        "--lambda",
        "0.3",
        "--output-dir",
        &d("fused"),
    ])?;
    step(&[
        "evaluate",
        "--refs",
        &d("refs.tsv"),
        "--hyps",
        &d("fused/hyps.tsv"),
        "--baseline",
        &d("base/hyps.tsv"),
        "--baseline-name",
        "no-lm",
        "--output-dir",
        &d("report"),
    ])?;
    step(&[
        "sweep-lambda",
        "--lattices",
        &d("lattices"),
        "--vocab",
        &d("vocab.txt"),
        "--lm",
        &d("lm/checkpoint"),
        "--refs",
        &d("refs.tsv"),
        "--output-dir",
        &d("sweep"),
    ])
}

/// Every file under `dir` keyed by relative path, except training logs,
/// which carry wall-clock throughput.
pub fn tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, at: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        let mut entries: Vec<_> = fs::read_dir(at).unwrap().map(|e| e.unwrap().path()).collect();
        entries.sort();
        for p in entries {
            if p.is_dir() {
                walk(root, &p, out);
            } else if p.file_name().is_some_and(|n| n != "train_log.csv") {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

/// Differences between two trees, as relative paths.
pub fn tree_diff(a: &BTreeMap<PathBuf, Vec<u8>>, b: &BTreeMap<PathBuf, Vec<u8>>) -> Vec<PathBuf> {
    let mut keys: Vec<&PathBuf> = a.keys().chain(b.keys()).collect();
    keys.sort();
    keys.dedup();
    keys.into_iter().filter(|k| a.get(*k) != b.get(*k)).cloned().collect()
}

/// Rows of `sweep.csv` as `(lambda label, micro wer)`.
pub fn sweep_rows(path: &Path) -> Vec<(String, f64)> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| {
            let cols: Vec<&str> = l.split(',').collect();
            (cols[0].to_string(), cols[1].parse().unwrap())
        })
        .collect()
}
