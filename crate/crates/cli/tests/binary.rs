mod common;

use std::process::Command;

fn factrace() -> Command {
    Command::new(env!("CARGO_BIN_EXE_factrace"))
}

#[test]
fn pipeline_command_succeeds_and_prints_the_report() {
    let dir = tempfile::tempdir().unwrap();
    let config = common::write_config(dir.path(), common::TINY);
    let out = factrace().arg("pipeline").arg("--config").arg(&config).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("query accuracy"), "{stdout}");
    assert!(dir.path().join("run/reports/report.json").exists());

    let out = factrace()
        .args(["sweep-layers", "--tags", "G.0", "--tags", "G.0,A.E.0", "--config"])
        .arg(&config)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("G.0,A.E.0"));
}

#[test]
fn stages_run_one_at_a_time() {
    let dir = tempfile::tempdir().unwrap();
    let config = common::write_config(dir.path(), common::TINY);
    let run = |args: &[&str]| {
        let out = factrace().args(args).arg("--config").arg(&config).output().unwrap();
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    };
    run(&["gen"]);
    run(&["train"]);
    run(&["ckpt-select"]);
    run(&["bm25"]);
    run(&["score"]);
    run(&["eval", "--subsamples", "2x4"]);
    assert!(dir.path().join("run/reports/eval/eval.csv").exists());
}

#[test]
fn missing_upstream_stage_fails_with_a_hint() {
    let dir = tempfile::tempdir().unwrap();
    let config = common::write_config(dir.path(), common::TINY);
    let out = factrace().arg("score").arg("--config").arg(&config).output().unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("first"), "{stderr}");
}

#[test]
fn bad_config_fails() {
    let dir = tempfile::tempdir().unwrap();
    let config = common::write_config(dir.path(), "seed = 1\n[eval]\nmethods = [\"nope\"]\n");
    let out = factrace().arg("gen").arg("--config").arg(&config).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown method"));
}

#[test]
fn cache_dir_can_be_overridden() {
    let dir = tempfile::tempdir().unwrap();
    let cache = tempfile::tempdir().unwrap();
    let config = common::write_config(dir.path(), common::TINY);
    let out = factrace()
        .arg("pipeline")
        .arg("--config")
        .arg(&config)
        .env(factrace_cli::config::CACHE_DIR_ENV, cache.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(cache.path().join("scores/stage.json").exists());
    assert!(!dir.path().join("run/cache").exists());
}
