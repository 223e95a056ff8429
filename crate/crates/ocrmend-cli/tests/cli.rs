//! Black-box tests of the `ocrmend` binary: exit codes, file outputs,
//! config handling, and golden `--help` text.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ocrmend"))
}

fn run_in(dir: &Path, args: &[&str]) -> Output {
    bin()
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn assert_exit(out: &Output, code: i32) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "stdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn write_clean(dir: &Path) -> PathBuf {
    let path = dir.join("clean.txt");
    let sentences = ocrmend::synth::sentences(40, 1234);
    std::fs::write(&path, sentences.join("\n") + "\n").unwrap();
    path
}

fn make_pairs(dir: &Path) -> PathBuf {
    let clean = write_clean(dir);
    let pairs = dir.join("pairs.jsonl");
    let out = run_in(
        dir,
        &[
            "--seed",
            "5",
            "noise",
            "--input",
            clean.to_str().unwrap(),
            "--output",
            pairs.to_str().unwrap(),
        ],
    );
    assert_exit(&out, 0);
    pairs
}

const TINY_MODEL: &[&str] = &[
    "--d-token", "16", "--d-conf", "4", "--n-heads", "4", "--enc-layers", "1",
    "--dec-layers", "1", "--d-ff", "32", "--max-len", "64",
];
const TINY_TRAIN: &[&str] = &[
    "--max-steps", "4", "--tokens-per-batch", "512", "--eval-every", "2",
    "--cer-sentences", "2", "--warmup", "10",
];

fn train_tiny_model(dir: &Path, pairs: &Path) -> PathBuf {
    let model_dir = dir.join("model");
    let mut args = vec![
        "--seed",
        "5",
        "train",
        "--data",
        pairs.to_str().unwrap(),
        "--out-dir",
        model_dir.to_str().unwrap(),
        "--vocab-size-unused", // replaced below
    ];
    args.pop();
    args.extend_from_slice(TINY_MODEL);
    args.extend_from_slice(TINY_TRAIN);
    let out = run_in(dir, &args);
    assert_exit(&out, 0);
    model_dir
}

#[test]
fn eval_identical_files_reports_zero_cer() {
    let dir = tempfile::tempdir().unwrap();
    let text = "abc def\nghi\n";
    std::fs::write(dir.path().join("h.txt"), text).unwrap();
    std::fs::write(dir.path().join("r.txt"), text).unwrap();
    let out = run_in(dir.path(), &["eval", "--hyp", "h.txt", "--ref", "r.txt"]);
    assert_exit(&out, 0);
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("cer 0.000000"), "{stdout}");
}

#[test]
fn eval_misaligned_files_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("h.txt"), "a\nb\n").unwrap();
    std::fs::write(dir.path().join("r.txt"), "a\n").unwrap();
    let out = run_in(dir.path(), &["eval", "--hyp", "h.txt", "--ref", "r.txt"]);
    assert_exit(&out, 2);
}

#[test]
fn missing_input_file_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_in(
        dir.path(),
        &["eval", "--hyp", "nope.txt", "--ref", "nope.txt"],
    );
    assert_exit(&out, 2);
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_in(dir.path(), &["eval", "--bogus"]);
    assert_exit(&out, 1);
}

#[test]
fn noise_with_zero_rates_copies_clean_text() {
    let dir = tempfile::tempdir().unwrap();
    let clean = write_clean(dir.path());
    let out = run_in(
        dir.path(),
        &[
            "--seed", "9", "noise",
            "--input", clean.to_str().unwrap(),
            "--output", "pairs.jsonl",
            "--p-remove", "0", "--p-insert", "0", "--p-replace", "0",
        ],
    );
    assert_exit(&out, 0);
    let loaded = ocrmend::corpus::load_pairs(&dir.path().join("pairs.jsonl"), true).unwrap();
    assert_eq!(loaded.dataset.len(), 40);
    for pair in &loaded.dataset.pairs {
        assert_eq!(pair.noisy, pair.clean);
    }
    assert!(dir.path().join("pairs.jsonl.effective.cfg").exists());
}

#[test]
fn sweep_accepts_the_published_bpe_sizes() {
    let dir = tempfile::tempdir().unwrap();
    let pairs = make_pairs(dir.path());
    let mut args = vec![
        "--seed", "5", "sweep",
        "--axis", "bpe",
        "--values", "100,300,500,1000,2000",
        "--data", pairs.to_str().unwrap(),
        "--out", "sweep.csv",
    ];
    args.extend_from_slice(TINY_MODEL);
    args.extend_from_slice(&[
        "--max-steps", "1", "--tokens-per-batch", "512", "--eval-every", "1",
        "--cer-sentences", "0", "--warmup", "10",
    ]);
    let out = run_in(dir.path(), &args);
    assert_exit(&out, 0);
    let csv = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "variant,bpe_vocab_size,conf_vocab_size,loss,cer");
    assert_eq!(lines.len(), 6, "{csv}");
    for (line, size) in lines[1..].iter().zip(["100", "300", "500", "1000", "2000"]) {
        assert!(line.starts_with(&format!("transformer-cs,{size},101,")), "{line}");
    }
}

#[test]
fn diverged_training_exits_three_but_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let pairs = make_pairs(dir.path());
    let mut args = vec![
        "--seed", "5", "train",
        "--data", pairs.to_str().unwrap(),
        "--out-dir", "model",
    ];
    args.extend_from_slice(TINY_MODEL);
    args.extend_from_slice(&[
        "--max-steps", "6", "--tokens-per-batch", "512", "--eval-every", "3",
        "--cer-sentences", "0", "--warmup", "10", "--lr-factor", "1e305",
    ]);
    let out = run_in(dir.path(), &args);
    assert_exit(&out, 3);
    assert!(dir.path().join("model/model.ckpt").exists());
    assert!(dir.path().join("model/records.csv").exists());
}

#[test]
fn config_file_without_seed_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.cfg"), "[train]\nmax_steps = 3\n").unwrap();
    std::fs::write(dir.path().join("h.txt"), "a\n").unwrap();
    let out = run_in(
        dir.path(),
        &["--config", "run.cfg", "eval", "--hyp", "h.txt", "--ref", "h.txt"],
    );
    assert_exit(&out, 1);
}

#[test]
fn config_file_unknown_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.cfg"), "seed = 1\n[train]\nbogus = 3\n").unwrap();
    std::fs::write(dir.path().join("h.txt"), "a\n").unwrap();
    let out = run_in(
        dir.path(),
        &["--config", "run.cfg", "eval", "--hyp", "h.txt", "--ref", "h.txt"],
    );
    assert_exit(&out, 1);
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert!(stderr.contains("bogus"), "{stderr}");
}

#[test]
fn flags_override_config_file_in_effective_output() {
    let dir = tempfile::tempdir().unwrap();
    let clean = write_clean(dir.path());
    std::fs::write(
        dir.path().join("run.cfg"),
        "seed = 77\n[noise]\np_remove = 0.2\np_insert = 0.01\n",
    )
    .unwrap();
    let out = run_in(
        dir.path(),
        &[
            "--config", "run.cfg", "noise",
            "--input", clean.to_str().unwrap(),
            "--output", "pairs.jsonl",
            "--p-remove", "0.3",
        ],
    );
    assert_exit(&out, 0);
    let effective = std::fs::read_to_string(dir.path().join("pairs.jsonl.effective.cfg")).unwrap();
    assert!(effective.contains("seed = 77"), "{effective}");
    assert!(effective.contains("p_remove = 0.3"), "flag should win: {effective}");
    assert!(effective.contains("p_insert = 0.01"), "file should apply: {effective}");
}

#[test]
fn correct_handles_plain_and_jsonl_input() {
    let dir = tempfile::tempdir().unwrap();
    let pairs = make_pairs(dir.path());
    let model_dir = train_tiny_model(dir.path(), &pairs);

    std::fs::write(dir.path().join("plain.txt"), "abc def\nxyz\n").unwrap();
    let out = run_in(
        dir.path(),
        &[
            "correct",
            "--model", model_dir.to_str().unwrap(),
            "--input", "plain.txt",
            "--output", "fixed.txt",
        ],
    );
    assert_exit(&out, 0);
    let fixed = std::fs::read_to_string(dir.path().join("fixed.txt")).unwrap();
    assert_eq!(fixed.lines().count(), 2);

    let out = run_in(
        dir.path(),
        &[
            "correct",
            "--model", model_dir.to_str().unwrap(),
            "--input", pairs.to_str().unwrap(),
            "--output", "fixed2.txt",
        ],
    );
    assert_exit(&out, 0);
    assert_eq!(
        std::fs::read_to_string(dir.path().join("fixed2.txt"))
            .unwrap()
            .lines()
            .count(),
        40
    );
}

#[test]
fn attn_writes_labeled_heatmaps() {
    let dir = tempfile::tempdir().unwrap();
    let pairs = make_pairs(dir.path());
    let model_dir = train_tiny_model(dir.path(), &pairs);
    let out = run_in(
        dir.path(),
        &[
            "attn",
            "--model", model_dir.to_str().unwrap(),
            "--sentence", "abc def",
            "--layer", "1",
            "--out-dir", "attn",
            "--pgm",
        ],
    );
    assert_exit(&out, 0);
    for kind in ["encoder-self", "decoder-self", "source"] {
        assert!(
            dir.path().join(format!("attn/{kind}-layer1-mean.csv")).exists(),
            "{kind} csv missing"
        );
        assert!(dir.path().join(format!("attn/{kind}-layer1-mean.pgm")).exists());
    }
    // Out-of-range layer is a data error.
    let out = run_in(
        dir.path(),
        &[
            "attn",
            "--model", model_dir.to_str().unwrap(),
            "--sentence", "abc",
            "--layer", "7",
            "--out-dir", "attn2",
        ],
    );
    assert_exit(&out, 2);
}

#[test]
fn report_writes_token_csv() {
    let dir = tempfile::tempdir().unwrap();
    let pairs = make_pairs(dir.path());
    let model_dir = train_tiny_model(dir.path(), &pairs);
    let out = run_in(
        dir.path(),
        &[
            "report",
            "--model", model_dir.to_str().unwrap(),
            "--data", pairs.to_str().unwrap(),
            "--top-k", "3",
            "--out", "report.csv",
        ],
    );
    assert_exit(&out, 0);
    let csv = std::fs::read_to_string(dir.path().join("report.csv")).unwrap();
    assert!(csv.starts_with("token,success,failure,success_rate\n"));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("tokens missed most often"), "{stdout}");
}

#[test]
fn help_matches_golden_files() {
    let golden_dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden");
    let update = std::env::var_os("UPDATE_GOLDEN").is_some();
    let cases: &[(&str, &[&str])] = &[
        ("help.txt", &["--help"]),
        ("noise.txt", &["noise", "--help"]),
        ("bpe-train.txt", &["bpe-train", "--help"]),
        ("train.txt", &["train", "--help"]),
        ("correct.txt", &["correct", "--help"]),
        ("eval.txt", &["eval", "--help"]),
        ("sweep.txt", &["sweep", "--help"]),
        ("compare.txt", &["compare", "--help"]),
        ("attn.txt", &["attn", "--help"]),
        ("report.txt", &["report", "--help"]),
    ];
    for (file, args) in cases {
        let out = bin().args(*args).output().expect("binary runs");
        assert_eq!(out.status.code(), Some(0));
        let text = String::from_utf8(out.stdout).unwrap();
        let path = golden_dir.join(file);
        if update {
            std::fs::create_dir_all(&golden_dir).unwrap();
            std::fs::write(&path, &text).unwrap();
            continue;
        }
        let golden = std::fs::read_to_string(&path)
            .unwrap_or_else(|_| panic!("golden file {file} missing; run with UPDATE_GOLDEN=1"));
        assert_eq!(text, golden, "help text for {args:?} drifted; run with UPDATE_GOLDEN=1");
    }
}
