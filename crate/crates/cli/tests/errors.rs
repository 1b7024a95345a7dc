//! Failure modes reach the user as distinct messages and a non-zero exit.

use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_iupac-infill")).args(args).output().unwrap()
}

fn stderr_of(args: &[&str]) -> String {
    let out = run(args);
    assert!(!out.status.success(), "`{}` should fail", args.join(" "));
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = run(&["tokenize", "--nmae", "benzene"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--nmae"));
}

#[test]
fn missing_input_file_names_the_path() {
    let err = stderr_of(&["ingest", "--corpus", "/nonexistent/values.tsv", "--property", "logp"]);
    assert!(err.contains("/nonexistent/values.tsv"), "{err}");
}

#[test]
fn unknown_property_lists_the_choices() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("c.tsv");
    std::fs::write(&corpus, "benzene\t1.5\n").unwrap();
    let err = stderr_of(&["ingest", "--corpus", corpus.to_str().unwrap(), "--property", "boiling"]);
    assert!(err.contains("unknown property \"boiling\""), "{err}");
}

#[test]
fn checkpoint_with_future_version_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("m.ckpt");
    let mut bytes = b"IUPACINF".to_vec();
    bytes.extend_from_slice(&99u32.to_le_bytes());
    bytes.extend_from_slice(&[0; 16]);
    std::fs::write(&ckpt, bytes).unwrap();
    let err = stderr_of(&["edit", "--checkpoint", ckpt.to_str().unwrap(), "--target", "high", "--name", "benzene", "--mask", "0:1"]);
    assert!(err.contains("incompatible checkpoint format version 99 (supported: 1)"), "{err}");
}

#[test]
fn checkpoint_without_magic_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("m.ckpt");
    std::fs::write(&ckpt, b"not a checkpoint at all").unwrap();
    let err = stderr_of(&["edit", "--checkpoint", ckpt.to_str().unwrap(), "--target", "high", "--name", "benzene", "--mask", "0:1"]);
    assert!(err.contains("checkpoint:"), "{err}");
}

#[test]
fn malformed_mask_is_reported() {
    let err = stderr_of(&["edit", "--checkpoint", "x.ckpt", "--target", "high", "--name", "benzene", "--mask", "three"]);
    assert!(err.contains("three"), "{err}");
}

#[test]
fn tokenize_prints_one_token_per_line() {
    let out = run(&["tokenize", "--name", "2-acetyloxybenzoic acid"]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert_eq!(text.lines().count(), 7, "{text}");
}
