//! End-to-end tests of the `bidirsum` binary: artifact layout, exit
//! codes, the gamma=1 collapse between decoders, and byte-level
//! determinism of repeated runs.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_bidirsum"))
}

fn run_ok(args: &[&str]) -> Output {
    let out = bin().args(args).output().unwrap();
    assert!(
        out.status.success(),
        "bidirsum {args:?} failed:\n{}{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

/// Generates a corpus, trains a tiny model, and returns the run
/// directory containing best.ckpt and vocab.txt.
fn train_tiny(root: &Path) -> PathBuf {
    let gen_dir = root.join("gen");
    run_ok(&[
        "gen",
        "--task", "copy",
        "--n", "48",
        "--min-len", "2",
        "--max-len", "4",
        "--vocab-size", "20",
        "--seed", "7",
        "--out", gen_dir.to_str().unwrap(),
    ]);
    let run_dir = root.join("run");
    let corpus = gen_dir.join("corpus.tsv");
    run_ok(&[
        "train",
        "--train", corpus.to_str().unwrap(),
        "--val", corpus.to_str().unwrap(),
        "--vocab", gen_dir.join("vocab.txt").to_str().unwrap(),
        "--set", "model.embedding_dim=4",
        "--set", "model.hidden_dim=4",
        "--set", "model.attention_dim=8",
        "--set", "train.batch_size=8",
        "--set", "train.max_steps=6",
        "--set", "train.eval_every_steps=3",
        "--seed", "3",
        "--out", run_dir.to_str().unwrap(),
    ]);
    assert!(run_dir.join("best.ckpt").exists());
    assert!(run_dir.join("final.ckpt").exists());
    assert!(run_dir.join("train_log.tsv").exists());
    assert!(run_dir.join("config.resolved").exists());
    run_dir
}

fn write_inputs(root: &Path) -> PathBuf {
    let path = root.join("inputs.txt");
    std::fs::write(&path, "t5 t6 t7\nt8 t9\nt10 t11 t12 t13\n").unwrap();
    path
}

#[test]
fn pipeline_artifacts_and_decoder_collapse() {
    let tmp = tempfile::tempdir().unwrap();
    let run_dir = train_tiny(tmp.path());
    let inputs = write_inputs(tmp.path());
    let ckpt = run_dir.join("best.ckpt");
    let vocab = run_dir.join("vocab.txt");

    let decode = |dir: &str, decoder: &str, gamma: &str| -> String {
        let out_dir = tmp.path().join(dir);
        run_ok(&[
            "decode",
            "--checkpoint", ckpt.to_str().unwrap(),
            "--vocab", vocab.to_str().unwrap(),
            "--input", inputs.to_str().unwrap(),
            "--decoder", decoder,
            "--gamma", gamma,
            "--max-steps", "6",
            "--out", out_dir.to_str().unwrap(),
        ]);
        std::fs::read_to_string(out_dir.join("decode.jsonl")).unwrap()
    };

    // gamma=1 BBS must match plain forward beam search token-for-token.
    let bbs = decode("d-bbs", "bbs", "1.0");
    let beam = decode("d-beam", "beam", "1.0");
    let texts = |raw: &str| -> Vec<String> {
        raw.lines()
            .map(|l| {
                let v: serde_json::Value = serde_json::from_str(l).unwrap();
                v["text"].as_str().unwrap().to_owned()
            })
            .collect()
    };
    assert_eq!(texts(&bbs), texts(&beam));

    // Evaluation against the inputs themselves (copy task) succeeds and
    // writes a report with a mean row.
    let eval_dir = tmp.path().join("eval");
    let refs = tmp.path().join("refs.txt");
    std::fs::write(&refs, "t5 t6 t7\nt8 t9\nt10 t11 t12 t13\n").unwrap();
    run_ok(&[
        "eval",
        "--hypotheses", tmp.path().join("d-bbs/decode.jsonl").to_str().unwrap(),
        "--references", refs.to_str().unwrap(),
        "--vocab", vocab.to_str().unwrap(),
        "--out", eval_dir.to_str().unwrap(),
    ]);
    let report = std::fs::read_to_string(eval_dir.join("rouge_report.tsv")).unwrap();
    assert!(report.lines().last().unwrap().starts_with("mean\t"));
}

#[test]
fn repeated_runs_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let dir_a = train_tiny(&tmp.path().join("a"));
    let dir_b = train_tiny(&tmp.path().join("b"));
    let read = |d: &Path, f: &str| std::fs::read(d.join(f)).unwrap();
    assert_eq!(read(&dir_a, "best.ckpt"), read(&dir_b, "best.ckpt"));
    assert_eq!(read(&dir_a, "final.ckpt"), read(&dir_b, "final.ckpt"));
    assert_eq!(read(&dir_a, "train_log.tsv"), read(&dir_b, "train_log.tsv"));

    let inputs = write_inputs(tmp.path());
    let decode = |tag: &str, src_dir: &Path| -> Vec<u8> {
        let out_dir = tmp.path().join(tag);
        run_ok(&[
            "decode",
            "--checkpoint", src_dir.join("best.ckpt").to_str().unwrap(),
            "--vocab", src_dir.join("vocab.txt").to_str().unwrap(),
            "--input", inputs.to_str().unwrap(),
            "--decoder", "bbs",
            "--out", out_dir.to_str().unwrap(),
        ]);
        std::fs::read(out_dir.join("decode.jsonl")).unwrap()
    };
    assert_eq!(decode("da", &dir_a), decode("db", &dir_b));
}

#[test]
fn params_prints_both_figures() {
    let out = run_ok(&["params"]);
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("34434722") || stdout.contains("34,434,722"));
    assert!(stdout.contains("computed parameters"));
}

#[test]
fn exit_codes_distinguish_failure_classes() {
    // Unknown subcommand → usage error.
    let out = bin().arg("frobnicate").output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(!out.stderr.is_empty());

    // Unknown config key → usage error.
    let out = bin().args(["params", "--set", "model.layers=2"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));

    // Missing checkpoint → data error.
    let tmp = tempfile::tempdir().unwrap();
    let inputs = write_inputs(tmp.path());
    let out = bin()
        .args([
            "decode",
            "--checkpoint", tmp.path().join("absent.ckpt").to_str().unwrap(),
            "--vocab", tmp.path().join("absent.txt").to_str().unwrap(),
            "--input", inputs.to_str().unwrap(),
            "--out", tmp.path().join("out").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));

    // --help exits 0.
    let out = bin().arg("--help").output().unwrap();
    assert_eq!(out.status.code(), Some(0));
}

#[test]
fn quick_check_passes() {
    let out = run_ok(&["check", "--quick"]);
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("gradient_finite_difference: PASS"));
    assert!(stdout.contains("bbs_oracle_equivalence: PASS"));
    assert!(stdout.contains("distribution_validity: PASS"));
    assert!(!stdout.contains("FAIL"));
}
