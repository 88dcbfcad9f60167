//! End-to-end pipeline smoke test through the command-line binary.

use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_cohgen"))
}

fn run(args: &[&str], dir: &Path) {
    let out = bin().args(args).current_dir(dir).output().unwrap();
    assert!(
        out.status.success(),
        "cohgen {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn pipeline_smoke() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();

    run(
        &[
            "synth",
            "--out",
            "corpus.tsv",
            "--topics",
            "4",
            "--pairs-per-topic",
            "60",
            "--noise",
            "0.4",
            "--seed",
            "7",
        ],
        d,
    );
    run(
        &[
            "train-embeddings",
            "--corpus",
            "corpus.tsv",
            "--out",
            "emb.txt",
            "--dim",
            "12",
            "--epochs",
            "15",
            "--seed",
            "7",
        ],
        d,
    );
    run(
        &["score", "--corpus", "corpus.tsv", "--embeddings", "emb.txt", "--out", "scored.tsv"],
        d,
    );
    run(
        &[
            "filter",
            "--corpus",
            "scored.tsv",
            "--out",
            "filtered.tsv",
            "--threshold",
            "0.68",
        ],
        d,
    );
    // every surviving pair is at or above the threshold
    let filtered = std::fs::read_to_string(d.join("filtered.tsv")).unwrap();
    let mut survivors = 0;
    for line in filtered.lines().filter(|l| !l.starts_with("#%")) {
        let score: f64 = line.rsplit('\t').next().unwrap().parse().unwrap();
        assert!(score >= 0.68, "kept pair below threshold: {line}");
        survivors += 1;
    }
    assert!(survivors > 0);

    run(
        &[
            "split",
            "--corpus",
            "scored.tsv",
            "--out-prefix",
            "part",
            "--train",
            "180",
            "--dev",
            "20",
            "--test",
            "40",
            "--seed",
            "1",
        ],
        d,
    );
    run(
        &[
            "train",
            "--corpus",
            "part.dev.tsv",
            "--embeddings",
            "emb.txt",
            "--out",
            "model.bin",
            "--epochs",
            "2",
            "--batch-size",
            "8",
            "--emb-dim",
            "10",
            "--hidden",
            "12",
            "--latent-dim",
            "4",
            "--cond-hidden",
            "6",
            "--enc-layers",
            "1",
            "--dec-layers",
            "1",
            "--dropout",
            "0",
            "--max-freerun-len",
            "6",
            "--seed",
            "3",
        ],
        d,
    );
    run(
        &[
            "generate",
            "--model",
            "model.bin",
            "--embeddings",
            "emb.txt",
            "--corpus",
            "part.test.tsv",
            "--out",
            "gen.txt",
            "--c",
            "0.95",
            "--decode",
            "beam:5",
            "--seed",
            "5",
        ],
        d,
    );
    run(
        &[
            "evaluate",
            "--corpus",
            "part.test.tsv",
            "--hypotheses",
            "gen.txt",
            "--embeddings",
            "emb.txt",
            "--out",
            "report.txt",
        ],
        d,
    );

    // the report exists and parses as key-value lines
    let report = std::fs::read_to_string(d.join("report.txt")).unwrap();
    let mut keys = Vec::new();
    for line in report.lines().filter(|l| !l.starts_with("#%")) {
        let (k, v) = line.split_once(' ').unwrap();
        v.parse::<f64>().unwrap();
        keys.push(k.to_string());
    }
    for expected in ["bleu", "b1", "b2", "b3", "coh", "d1", "d2", "d_sent"] {
        assert!(keys.iter().any(|k| k == expected), "missing {expected}");
    }
}

#[test]
fn errors_are_single_line_with_class() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["score", "--corpus", "missing.tsv", "--embeddings", "missing.txt", "--out", "x"])
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    let lines: Vec<&str> = stderr.lines().collect();
    assert_eq!(lines.len(), 1, "expected one error line, got: {stderr}");
    assert!(lines[0].starts_with("error IoError: "), "got: {}", lines[0]);
}

#[test]
fn baseline_variant_trains() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    run(
        &["synth", "--out", "c.tsv", "--topics", "2", "--pairs-per-topic", "8", "--seed", "2"],
        d,
    );
    run(
        &[
            "train-embeddings",
            "--corpus",
            "c.tsv",
            "--out",
            "e.txt",
            "--dim",
            "6",
            "--epochs",
            "5",
        ],
        d,
    );
    run(
        &[
            "train",
            "--corpus",
            "c.tsv",
            "--embeddings",
            "e.txt",
            "--out",
            "m.bin",
            "--variant",
            "attention",
            "--epochs",
            "1",
            "--batch-size",
            "4",
            "--emb-dim",
            "6",
            "--hidden",
            "8",
            "--latent-dim",
            "4",
            "--cond-hidden",
            "4",
            "--enc-layers",
            "1",
            "--dec-layers",
            "1",
            "--dropout",
            "0",
            "--max-freerun-len",
            "4",
        ],
        d,
    );
    assert!(d.join("m.bin").exists());
}
