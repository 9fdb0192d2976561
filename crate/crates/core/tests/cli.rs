//! The `ctxeval` binary: exit codes and the commands that need no run.

use std::path::Path;
use std::process::{Command, Output};

fn ctxeval(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_ctxeval"));
    cmd.args(args);
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn config_prints_resolved_toml_with_env_overrides() {
    let o = ctxeval(&["config"], &[("CTXEVAL_KS", "[4, 8]")]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    let cfg = ctxeval::harness::RunConfig::from_toml_str(&text).unwrap();
    assert_eq!(cfg.ks, vec![4, 8]);
}

#[test]
fn configuration_errors_exit_with_2() {
    let o = ctxeval(&["-c", "/nonexistent/run.toml", "config"], &[]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    let o = ctxeval(&["config"], &[("CTXEVAL_KS", "[]")]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "regimes = [\"Nope\"]\n").unwrap();
    let o = ctxeval(&["-c", bad.to_str().unwrap(), "config"], &[]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn stage_without_its_inputs_exits_with_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = ctxeval(&["-o", out.to_str().unwrap(), "evaluate"], &[]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("error"));
}

#[test]
fn report_on_an_empty_run_is_partial_not_fatal() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = ctxeval(&["-o", out.to_str().unwrap(), "report"], &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stderr(&o).contains("missing"), "{}", stderr(&o));
    assert!(Path::new(&out).join("report.json").exists());
}

#[test]
fn validate_trace_reports_schema_violations() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.jsonl");
    std::fs::write(&path, "{\"schema_version\": \"1\"}\n").unwrap();
    let o = ctxeval(&["validate-trace", path.to_str().unwrap()], &[]);
    assert_ne!(code(&o), 0);

    std::fs::write(&path, "not json\n").unwrap();
    let o = ctxeval(&["validate-trace", path.to_str().unwrap()], &[]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));

    let o = ctxeval(&["validate-trace", dir.path().join("absent").to_str().unwrap()], &[]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}
