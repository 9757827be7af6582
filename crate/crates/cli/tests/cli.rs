//! End-to-end checks of the `codeplane` binary: subcommands, reproducible
//! outputs, and failure exit codes.

use std::path::{Path, PathBuf};
use std::process::Command;

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn codeplane() -> Command {
    Command::new(env!("CARGO_BIN_EXE_codeplane"))
}

#[test]
fn compile_reproduces_the_archived_configs() {
    for (function, golden) in [
        ("butterfly", "butterfly.config"),
        ("diversity", "diversity.config"),
        ("baseline", "butterfly_baseline.config"),
    ] {
        let topo = if function == "diversity" {
            "diversity.topo"
        } else {
            "butterfly.topo"
        };
        let out = codeplane()
            .args(["compile", "--topology"])
            .arg(fixtures().join(topo))
            .args(["--function", function])
            .output()
            .unwrap();
        assert!(out.status.success(), "{function}: {out:?}");
        let expected = std::fs::read_to_string(fixtures().join(golden)).unwrap();
        assert_eq!(String::from_utf8(out.stdout).unwrap(), expected, "{function}");
    }
}

#[test]
fn simulate_runs_the_packaged_scenario_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let run = |out: &Path| {
        let output = codeplane()
            .args(["simulate", "--scenario"])
            .arg(fixtures().join("butterfly.scenario"))
            .arg("--out-dir")
            .arg(out)
            .output()
            .unwrap();
        assert!(output.status.success(), "{output:?}");
        String::from_utf8(output.stdout).unwrap()
    };
    let first = run(&dir.path().join("a"));
    let second = run(&dir.path().join("b"));
    // the echoed header names the differing out dirs; the traces must match
    assert!(first.starts_with("# codeplane simulate"));
    for name in ["receiver_101_5.csv", "receiver_102_5.csv", "counters.csv"] {
        let a = std::fs::read(dir.path().join("a").join(name)).unwrap();
        let b = std::fs::read(dir.path().join("b").join(name)).unwrap();
        assert_eq!(a, b, "{name}");
    }
    // the scenario's mid-stream branch outage shows up as accounted loss
    let csv = std::fs::read_to_string(dir.path().join("a").join("receiver_101_5.csv")).unwrap();
    assert!(csv.lines().count() > 1);
    assert!(second.contains("deliveries"));
}

#[test]
fn bad_arguments_exit_nonzero() {
    let out = codeplane()
        .args(["compile", "--topology"])
        .arg(fixtures().join("butterfly.topo"))
        .args(["--function", "nonsense"])
        .output()
        .unwrap();
    assert!(!out.status.success());

    let out = codeplane()
        .args(["simulate", "--scenario", "/does/not/exist"])
        .output()
        .unwrap();
    assert!(!out.status.success());
}

#[test]
fn butterfly_rate_single_point_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = codeplane()
        .args(["butterfly-rate", "--topology"])
        .arg(fixtures().join("butterfly.topo"))
        .args([
            "--packets",
            "120",
            "--payload-size",
            "1024",
            "--send-rate-ratio",
            "0.5",
            "--reps",
            "2",
            "--seed",
            "7",
            "--out-dir",
        ])
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{out:?}");
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.starts_with("# codeplane butterfly-rate"));
    assert!(stdout.contains("seed=7"));
    for name in [
        "butterfly_rate.csv",
        "butterfly_knees.csv",
        "butterfly_rate.svg",
    ] {
        assert!(dir.path().join(name).exists(), "{name}");
    }
}
