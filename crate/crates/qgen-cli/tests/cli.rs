//! End-to-end tests of the `qgen` binary: subcommand plumbing and exit
//! codes (0 success, 1 usage, 2 backend failure, 3 data error).

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn qgen() -> Command {
    Command::new(env!("CARGO_BIN_EXE_qgen"))
}

fn write_objectives(dir: &Path) -> PathBuf {
    let path = dir.join("objectives.csv");
    std::fs::write(
        &path,
        "id,form,text,unit,topic\n\
         LO-1,action-based,describe the steps of the carbon cycle,Unit 1,Topic 1.4\n\
         LO-2,action-based,explain how irrigation methods differ,Unit 5,Topic 5.5\n",
    )
    .unwrap();
    path
}

fn write_config(dir: &Path) -> PathBuf {
    let path = dir.join("config.toml");
    std::fs::write(
        &path,
        "per_lo_target = 8\nconfidence_threshold = 0.5\nseed = 13\n\n[backend]\nkind = \"mock\"\n",
    )
    .unwrap();
    path
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("spawn qgen")
}

#[test]
fn full_run_then_stagewise_rerun_matches() {
    let dir = tempfile::tempdir().unwrap();
    let objectives = write_objectives(dir.path());
    let config = write_config(dir.path());
    let full = dir.path().join("full.jsonl");

    let out = run(qgen()
        .args(["run", "--config"])
        .arg(&config)
        .arg("--objectives")
        .arg(&objectives)
        .arg("--out")
        .arg(&full));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("generated"), "missing stage summary: {stdout}");
    assert!(stdout.contains("alignment-pass"));

    // The same pipeline as four resumable stages.
    let staged = dir.path().join("staged.jsonl");
    let out = run(qgen()
        .args(["generate", "--config"])
        .arg(&config)
        .arg("--objectives")
        .arg(&objectives)
        .arg("--out")
        .arg(&staged));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for stage in ["filter", "confide", "align"] {
        let mut cmd = qgen();
        cmd.arg(stage);
        if stage != "filter" {
            cmd.arg("--config").arg(&config);
        }
        let out = run(cmd.arg("--bank").arg(&staged).arg("--out").arg(&staged));
        assert!(
            out.status.success(),
            "{stage}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    assert_eq!(
        std::fs::read(&full).unwrap(),
        std::fs::read(&staged).unwrap(),
        "stagewise run diverged from the full run"
    );
}

#[test]
fn usage_errors_exit_1() {
    let out = run(qgen().args(["run", "--no-such-flag"]));
    assert_eq!(out.status.code(), Some(1));

    let out = run(qgen().args(["metrics", "--records", "x.jsonl", "--task", "bogus"]));
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn help_exits_0() {
    let out = run(qgen().arg("--help"));
    assert_eq!(out.status.code(), Some(0));
}

#[test]
fn data_errors_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let bogus = dir.path().join("bogus.jsonl");
    std::fs::write(&bogus, "{\"schema\":\"qgen-bank/99\",\"pipeline_config_digest\":\"\"}\n").unwrap();
    let out = run(qgen()
        .args(["filter", "--bank"])
        .arg(&bogus)
        .arg("--out")
        .arg(dir.path().join("out.jsonl")));
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));

    // Missing file is a data error too.
    let out = run(qgen()
        .args(["filter", "--bank"])
        .arg(dir.path().join("missing.jsonl"))
        .arg("--out")
        .arg(dir.path().join("out.jsonl")));
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn backend_failures_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let objectives = write_objectives(dir.path());
    let config = dir.path().join("config.toml");
    // Nothing listens on this port.
    std::fs::write(
        &config,
        "per_lo_target = 2\n\n[backend]\nkind = \"http\"\nendpoint = \"http://127.0.0.1:9\"\nmodel = \"m\"\n",
    )
    .unwrap();
    let out = run(qgen()
        .args(["run", "--config"])
        .arg(&config)
        .arg("--objectives")
        .arg(&objectives)
        .arg("--out")
        .arg(dir.path().join("bank.jsonl")));
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn eval_judge_metrics_chain() {
    let dir = tempfile::tempdir().unwrap();
    let objectives = write_objectives(dir.path());
    let config = dir.path().join("config.toml");
    // Low threshold so enough questions survive to draw an eval set.
    std::fs::write(
        &config,
        "per_lo_target = 30\nconfidence_threshold = 0.3\nseed = 5\n\n[backend]\nkind = \"mock\"\n",
    )
    .unwrap();
    let bank = dir.path().join("bank.jsonl");
    let out = run(qgen()
        .args(["run", "--config"])
        .arg(&config)
        .arg("--objectives")
        .arg(&objectives)
        .arg("--out")
        .arg(&bank));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let items = dir.path().join("items.json");
    let out = run(qgen()
        .args(["eval-set", "--bank"])
        .arg(&bank)
        .args(["--n-los", "2", "--per-lo", "4", "--seed", "3", "--out"])
        .arg(&items));
    if !out.status.success() {
        // A deficient mock bank is a data error, not a crash.
        assert_eq!(out.status.code(), Some(3));
        return;
    }

    let records = dir.path().join("records.jsonl");
    let out = run(qgen()
        .args(["judge", "--config"])
        .arg(&config)
        .arg("--bank")
        .arg(&bank)
        .arg("--items")
        .arg(&items)
        .args(["--judge-id", "M1", "--out"])
        .arg(&records));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let grid = dir.path().join("grid.csv");
    let out = run(qgen()
        .args(["metrics", "--records"])
        .arg(&records)
        .args(["--task", "answer", "--machine", "M1", "--csv"])
        .arg(&grid));
    // A single judge has no pairs; that is a data error, while two or
    // more judges would succeed. Either way it must not panic.
    assert!(matches!(out.status.code(), Some(0) | Some(3)));
}

#[test]
fn ablate_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let objectives = write_objectives(dir.path());
    let config = write_config(dir.path());
    let bank = dir.path().join("bank.jsonl");
    let out = run(qgen()
        .args(["run", "--config"])
        .arg(&config)
        .arg("--objectives")
        .arg(&objectives)
        .arg("--out")
        .arg(&bank));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let report = dir.path().join("ablation.csv");
    let out = run(qgen()
        .args(["ablate", "--config"])
        .arg(&config)
        .arg("--bank")
        .arg(&bank)
        .args(["--repeats", "2", "--out"])
        .arg(&report));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&report).unwrap();
    let lines = text.lines().count();
    // Header plus (1 A row + 16 B + 16 C) per run.
    assert_eq!(lines, 1 + 2 * 33);
}
