mod common;

use std::fs;
use std::process::Command;

use common::{moefusion, pipeline, tree, tree_diff};

const SUBCOMMANDS: [&str; 7] = [
    "train-tokenizer",
    "train-lm",
    "decode",
    "evaluate",
    "flops",
    "sweep-lambda",
    "gen-synthetic",
];

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_moefusion"))
}

#[test]
fn help_succeeds_everywhere() {
    assert_eq!(bin().arg("--help").status().unwrap().code(), Some(0));
    for sub in SUBCOMMANDS {
        let out = bin().args([sub, "--help"]).output().unwrap();
        assert_eq!(out.status.code(), Some(0), "{sub}");
        assert!(String::from_utf8_lossy(&out.stdout).contains("Usage"));
    }
}

#[test]
fn usage_errors_exit_one() {
    let out = bin().args(["flops", "--bogus"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(!out.stderr.is_empty());
    assert_eq!(moefusion(&["frobnicate"]), 1);
    assert_eq!(moefusion(&[]), 1);
    // An LM without a fusion weight is rejected.
    assert_eq!(
        moefusion(&["decode", "--lattices", ".", "--vocab", "v", "--lm", "x"]),
        1
    );
    // Inputs must exist.
    assert_eq!(
        moefusion(&["train-tokenizer", "--manifest", "/nonexistent/manifest.tsv"]),
        1
    );
}

#[test]
fn runtime_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("manifest.tsv");
    fs::write(&manifest, "xx\tmissing.txt\n").unwrap();
    let out = dir.path().to_str().unwrap();
    assert_eq!(
        moefusion(&[
            "train-tokenizer",
            "--manifest",
            manifest.to_str().unwrap(),
            "--output-dir",
            out
        ]),
        2
    );
}

#[test]
fn flops_reports_the_base_config() {
    let out = bin().arg("flops").output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("total_params"), "{text}");
    assert!(text.contains("active_params_per_token"), "{text}");
}

#[test]
fn pipeline_is_reproducible_and_zero_weight_is_inert() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    pipeline(a.path(), 40).unwrap();
    pipeline(b.path(), 40).unwrap();
    let (ta, tb) = (tree(a.path()), tree(b.path()));
    assert!(ta.keys().any(|k| k.starts_with("lm/checkpoint")));
    assert_eq!(tree_diff(&ta, &tb), Vec::<std::path::PathBuf>::new());

    let d = |p: &str| a.path().join(p).to_str().unwrap().to_string();
    let code = moefusion(&[
        "decode",
        "--lattices",
        &d("lattices"),
        "--vocab",
        &d("vocab.txt"),
        "--lm",
        &d("lm/checkpoint"),
        "--lambda",
        "0",
        "--output-dir",
        &d("zero"),
    ]);
    assert_eq!(code, 0);
    assert_eq!(
        fs::read(d("zero/hyps.tsv")).unwrap(),
        fs::read(d("base/hyps.tsv")).unwrap()
    );

    let report = fs::read_to_string(d("report/report.csv")).unwrap();
    assert!(report.starts_with("locale,wer,baseline_wer,werr\n"));
    assert_eq!(report.lines().count(), 4);
}

#[test]
fn config_file_is_read_and_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    let d = |p: &str| dir.path().join(p).to_str().unwrap().to_string();
    assert_eq!(
        moefusion(&[
            "gen-synthetic",
            "--stage",
            "corpus",
            "--locales",
            "1",
            "--output-dir",
            &d("")
        ]),
        0
    );
    assert_eq!(
        moefusion(&[
            "train-tokenizer",
            "--manifest",
            &d("manifest.tsv"),
            "--vocab-size",
            "200",
            "--output-dir",
            &d("")
        ]),
        0
    );
    fs::write(
        d("cfg.toml"),
        "[model]\nexperts = 2\n\n[train]\nsteps = 50\nbatch_size = 2\n",
    )
    .unwrap();
    let code = moefusion(&[
        "train-lm",
        "--manifest",
        &d("manifest.tsv"),
        "--vocab",
        &d("vocab.txt"),
        "--config",
        &d("cfg.toml"),
        "--steps",
        "3",
        "--output-dir",
        &d("lm"),
    ]);
    assert_eq!(code, 0);
    let log = fs::read_to_string(d("lm/train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 4, "{log}");
    let routing = fs::read_to_string(d("lm/routing.csv")).unwrap();
    // The file sets two experts.
    assert!(
        routing
            .lines()
            .skip(1)
            .all(|l| matches!(l.split(',').nth(1), Some("0" | "1"))),
        "{routing}"
    );

    fs::write(d("bad.toml"), "[model]\nexperts_typo = 2\n").unwrap();
    let code = moefusion(&[
        "train-lm",
        "--manifest",
        &d("manifest.tsv"),
        "--vocab",
        &d("vocab.txt"),
        "--config",
        &d("bad.toml"),
        "--output-dir",
        &d("lm2"),
    ]);
    assert_eq!(code, 2);
}
