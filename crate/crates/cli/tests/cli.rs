//! End-to-end behaviour of the `bimlp` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn data_dir() -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../data/mnist-5k")
        .to_str()
        .unwrap()
        .to_string()
}

fn bimlp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bimlp"))
        .args(args)
        .env_remove("BIMLP_SELFTEST_FAULT")
        .env_remove("BIMLP_DATA_DIR")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn train(out: &Path, stage: &str, epochs: &str, extra: &[&str]) -> Output {
    let data = data_dir();
    let mut args = vec![
        "train", "--data", &data, "--stage", stage, "--epochs", epochs, "--train-limit", "300", "--test-limit",
        "100", "--batch-size", "64", "--lr", "1e-2", "--out",
    ];
    let out = out.to_str().unwrap().to_string();
    args.push(&out);
    args.extend_from_slice(extra);
    bimlp(&args)
}

fn ok(o: Output) -> Output {
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    o
}

fn path(dir: &Path, name: &str) -> PathBuf {
    dir.join(name)
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let full = tempfile::tempdir().unwrap();
    let resumed = tempfile::tempdir().unwrap();
    ok(train(full.path(), "0", "3", &[]));
    let mid = path(full.path(), "stage0-epoch001.ckpt");
    ok(train(resumed.path(), "0", "3", &["--resume", mid.to_str().unwrap()]));
    for f in ["stage0-final.ckpt", "stage0-epoch003.ckpt", "stage0.log.csv"] {
        assert_eq!(
            std::fs::read(path(full.path(), f)).unwrap(),
            std::fs::read(path(resumed.path(), f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn eval_reproduces_the_last_logged_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    ok(train(dir.path(), "1", "2", &["--alpha", "0"]));
    let log = std::fs::read_to_string(path(dir.path(), "stage1.log.csv")).unwrap();
    let last = log.lines().last().unwrap();
    let logged: Vec<&str> = last.split(',').skip(3).collect();
    let ckpt = path(dir.path(), "stage1-final.ckpt");
    let data = data_dir();
    // Different train limit on purpose: eval must use the stored normalization.
    let o = ok(bimlp(&[
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--data",
        &data,
        "--test-limit",
        "100",
    ]));
    let stdout = String::from_utf8(o.stdout).unwrap();
    let row = stdout.lines().nth(2).unwrap();
    assert_eq!(row, logged.join(","), "{stdout}");
    assert_eq!(stdout.lines().filter(|l| l.contains(',')).count(), 2 + 1 + 10);
}

#[test]
fn log_echoes_options_and_history() {
    let dir = tempfile::tempdir().unwrap();
    ok(train(dir.path(), "0", "2", &["--seed", "7"]));
    let log = std::fs::read_to_string(path(dir.path(), "stage0.log.csv")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert!(lines.iter().any(|l| l.starts_with('#') && l.contains("seed=7") && l.contains("lr=0.01")));
    let header = lines.iter().position(|l| *l == "epoch,lr,train_loss,val_top1,val_top5").unwrap();
    assert_eq!(lines.len() - header - 1, 2);
    assert!(lines[header + 1].starts_with("1,1.000000e-2,"));
}

#[test]
fn distillation_needs_a_teacher_unless_alpha_is_zero() {
    let dir = tempfile::tempdir().unwrap();
    let o = train(dir.path(), "1", "1", &[]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("--teacher"), "{}", stderr(&o));
    ok(train(dir.path(), "1", "1", &["--alpha", "0"]));
}

#[test]
fn stage_two_requires_an_init_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let o = train(dir.path(), "2", "1", &["--alpha", "0"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("--init"), "{}", stderr(&o));
    ok(train(dir.path(), "2", "1", &["--alpha", "0", "--allow-cold-start"]));
}

#[test]
fn stage_two_rejects_a_non_stage_one_init() {
    let dir = tempfile::tempdir().unwrap();
    ok(train(dir.path(), "0", "1", &[]));
    let fp = path(dir.path(), "stage0-final.ckpt");
    let o = train(dir.path(), "2", "1", &["--alpha", "0", "--init", fp.to_str().unwrap()]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn corrupted_checkpoint_is_an_io_class_error() {
    let dir = tempfile::tempdir().unwrap();
    ok(train(dir.path(), "0", "1", &[]));
    let ckpt = path(dir.path(), "stage0-final.ckpt");
    let mut bytes = std::fs::read(&ckpt).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x10;
    std::fs::write(&ckpt, bytes).unwrap();
    let data = data_dir();
    let o = bimlp(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--data", &data]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("checksum"), "{}", stderr(&o));
}

#[test]
fn missing_dataset_is_an_io_class_error() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope");
    let o = bimlp(&["train", "--stage", "0", "--data", missing.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
}

#[test]
fn selftest_fault_hook_fails_with_a_diagnostic() {
    let o = Command::new(env!("CARGO_BIN_EXE_bimlp"))
        .args(["selftest", "--quick"])
        .env("BIMLP_SELFTEST_FAULT", "ste")
        .output()
        .unwrap();
    assert_eq!(code(&o), 1);
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert!(stdout.contains("FAIL ste") && stdout.contains("first failure in ste"), "{stdout}");
    assert_eq!(code(&bimlp(&["selftest", "--quick"])), 0);
}

#[test]
fn analyze_writes_reports_and_rejects_bad_extents() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = ok(bimlp(&["analyze", "--preset", "tiny", "--input", "32x32", "--emit-plot-data", "--out", out]));
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert!(stdout.lines().last().unwrap().starts_with("FLOPs "));
    for f in ["analyze-tiny-32x32.txt", "analyze-tiny-32x32.csv", "plot-data.csv"] {
        assert!(path(dir.path(), f).exists(), "{f}");
    }
    assert_eq!(code(&bimlp(&["analyze", "--input", "0x32", "--out", out])), 2);
    assert_eq!(code(&bimlp(&["analyze", "--input", "banana", "--out", out])), 2);
}
