//! CLI behavior: exit codes, diagnostics, config echo reproducibility.

mod common;

use std::path::Path;
use std::process::Command;

const BIN: &str = env!("CARGO_BIN_EXE_ridgenet");

fn run_in(dir: &Path, args: &[&str]) -> (i32, String, String) {
    let out = Command::new(BIN)
        .args(args)
        .current_dir(dir)
        .output()
        .unwrap();
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

#[test]
fn no_arguments_prints_usage_and_exits_1() {
    let tmp = tempfile::tempdir().unwrap();
    let (code, _out, err) = run_in(tmp.path(), &[]);
    assert_eq!(code, 1);
    assert!(err.to_lowercase().contains("usage"), "{err}");
}

#[test]
fn usage_errors_exit_1_with_one_line_diagnostics() {
    let tmp = tempfile::tempdir().unwrap();
    // Unknown config key.
    let (code, _, err) = run_in(
        tmp.path(),
        &["synth", "--set", "no.such.key=1", "--out", "data"],
    );
    assert_eq!(code, 1);
    assert!(err.contains("no.such.key"), "{err}");

    // Missing required output.
    let (code, _, err) = run_in(tmp.path(), &["synth"]);
    assert_eq!(code, 1);
    assert!(err.contains("--out"), "{err}");

    // Malformed --set.
    let (code, _, err) = run_in(tmp.path(), &["synth", "--set", "oops", "--out", "d"]);
    assert_eq!(code, 1);
    assert!(err.contains("KEY=VALUE"), "{err}");
}

#[test]
fn data_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let (code, _, err) = run_in(
        tmp.path(),
        &["split", "--data", "missing_dir", "--seed", "1", "--out", "plan.tsv"],
    );
    assert_eq!(code, 2);
    assert!(!err.trim().is_empty());

    // Bad checkpoint file -> data/model error.
    std::fs::write(tmp.path().join("bogus.fpnt"), b"XXXX123").unwrap();
    let (code, _, err) = run_in(
        tmp.path(),
        &[
            "saliency", "--checkpoint", "bogus.fpnt", "--image", "x.pgm", "--label", "0",
            "--out", "sal",
        ],
    );
    assert_eq!(code, 2);
    assert!(err.contains("bad magic"), "{err}");
}

#[test]
fn paper_protocol_defaults_are_recorded_in_the_report() {
    let tmp = tempfile::tempdir().unwrap();
    let ok = |args: &[&str]| {
        let (code, out, err) = run_in(tmp.path(), args);
        assert_eq!(code, 0, "{args:?}: {err}");
        out
    };
    ok(&[
        "synth", "--subjects", "3", "--per-subject", "6", "--size", "32", "--seed", "5",
        "--out", "data",
    ]);
    ok(&["split", "--data", "data", "--seed", "5", "--out", "plan.tsv"]);
    // Epochs overridden to keep the smoke run fast; batch size and learning
    // rate stay at their defaults and must be echoed.
    let out = ok(&[
        "train", "--data", "data", "--split", "plan.tsv", "--report-dir", "run",
        "--set", "train.epochs=2", "--set", "model.input_size=32",
    ]);
    assert!(out.contains("best validation accuracy"), "{out}");

    let report = std::fs::read_to_string(tmp.path().join("run/train_report.csv")).unwrap();
    assert!(report.contains("# train.batch_size=24"), "{report}");
    assert!(report.contains("# train.learning_rate=0.0001"));
    assert!(report.contains("# train.epochs=2"));
    assert!(report.lines().any(|l| l == "epoch,train_loss,train_acc,val_acc"));

    let echo = std::fs::read_to_string(tmp.path().join("run/config_echo.txt")).unwrap();
    assert!(echo.contains("train.batch_size=24\n"));
    assert!(echo.contains("train.epochs=2\n"));
    assert!(echo.contains("model.variant=resnet_mini\n"));
}

#[test]
fn rerunning_from_the_echoed_config_reproduces_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    let ok = |args: &[&str]| {
        let (code, _, err) = run_in(tmp.path(), args);
        assert_eq!(code, 0, "{args:?}: {err}");
    };
    ok(&[
        "synth", "--subjects", "3", "--per-subject", "6", "--size", "32", "--seed", "9",
        "--out", "data",
    ]);
    ok(&["split", "--data", "data", "--seed", "9", "--out", "plan.tsv"]);
    ok(&[
        "train", "--data", "data", "--split", "plan.tsv", "--report-dir", "run1",
        "--set", "train.epochs=2", "--set", "model.input_size=32",
        "--set", "paths.checkpoint_out=ckpt1.fpnt",
    ]);

    // Second run driven purely by the echoed config, redirected outputs.
    ok(&[
        "train", "--config", "run1/config_echo.txt", "--report-dir", "run2",
        "--set", "paths.checkpoint_out=ckpt2.fpnt",
    ]);

    let c1 = std::fs::read(tmp.path().join("ckpt1.fpnt")).unwrap();
    let c2 = std::fs::read(tmp.path().join("ckpt2.fpnt")).unwrap();
    assert_eq!(c1, c2, "checkpoints differ when re-run from the echo");

    let strip_paths = |s: String| {
        s.lines()
            .filter(|l| !l.starts_with("# paths."))
            .collect::<Vec<_>>()
            .join("\n")
    };
    let r1 = strip_paths(std::fs::read_to_string(tmp.path().join("run1/train_report.csv")).unwrap());
    let r2 = strip_paths(std::fs::read_to_string(tmp.path().join("run2/train_report.csv")).unwrap());
    assert_eq!(r1, r2, "reports differ beyond their output paths");
}

#[test]
fn eval_and_saliency_cover_the_checkpoint_surface() {
    let tmp = tempfile::tempdir().unwrap();
    let ok = |args: &[&str]| {
        let (code, out, err) = run_in(tmp.path(), args);
        assert_eq!(code, 0, "{args:?}: {err}");
        out
    };
    ok(&[
        "synth", "--subjects", "3", "--per-subject", "6", "--size", "32", "--seed", "2",
        "--out", "data",
    ]);
    ok(&["split", "--data", "data", "--seed", "2", "--out", "plan.tsv"]);
    ok(&[
        "train", "--data", "data", "--split", "plan.tsv", "--report-dir", "run",
        "--set", "train.epochs=3", "--set", "model.input_size=32",
        "--set", "train.learning_rate=0.001",
    ]);
    let out = ok(&[
        "eval", "--checkpoint", "run/best.fpnt", "--data", "data", "--split", "plan.tsv",
        "--report-dir", "run",
    ]);
    assert!(out.contains("test accuracy"), "{out}");
    let confusion = std::fs::read_to_string(tmp.path().join("run/confusion.csv")).unwrap();
    assert!(confusion.starts_with("class,s000,s001,s002"));
    assert_eq!(confusion.lines().count(), 4);

    let out = ok(&[
        "saliency", "--checkpoint", "run/best.fpnt", "--image", "data/s001/i00.pgm",
        "--label", "1", "--window", "8", "--stride", "8", "--out", "sal",
    ]);
    assert!(out.contains("grid"), "{out}");
    for suffix in ["sal_map.pgm", "sal_confidence.pgm", "sal_grid.csv"] {
        assert!(tmp.path().join(suffix).exists(), "{suffix} missing");
    }
    let map = std::fs::read_to_string(tmp.path().join("sal_map.pgm")).unwrap();
    assert!(map.starts_with("P2\n"), "plain graymap expected");
    let grid = std::fs::read_to_string(tmp.path().join("sal_grid.csv")).unwrap();
    assert_eq!(grid.lines().next().unwrap(), "x,y,predicted_class,true_class_prob,flipped");
    assert_eq!(grid.lines().count(), 1 + 4 * 4, "header + 4x4 grid at 32px/8/8");
}
