use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = "n = 200\nd = 6\nanchor_pool = 40\nsteps = 150\neval_every = 50\nt_a = 50\n";

fn sgoif(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sgoif"))
        .args(args)
        .current_dir(cwd)
        .output()
        .unwrap()
}

fn write_config(dir: &Path, body: &str) -> String {
    let p = dir.join("cfg.toml");
    std::fs::write(&p, body).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn run_writes_the_artifact_set() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = sgoif(&["run", "--config", &cfg, "--out", "res", "--seed", "3"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("AUPR"));
    let res = dir.path().join("res");
    for f in ["metrics.json", "scores_epoch_0.csv", "controller_trace.csv", "solver_trace.csv"] {
        assert!(res.join(f).is_file(), "{f}");
    }
    let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(res.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(m["config"]["seed"], 3);

    let scores = res.join("scores_epoch_0.csv");
    let out = sgoif(&["metrics", scores.to_str().unwrap()], dir.path());
    assert!(out.status.success());
    let recomputed: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(recomputed.get("aupr").is_some());
}

#[test]
fn unknown_config_key_exits_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "n = 100\nstepz = 5\n");
    let out = sgoif(&["run", "--config", &cfg], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(!dir.path().join("out").exists());
}

#[test]
fn oracle_check_refuses_large_models() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "d = 150\n");
    let out = sgoif(&["oracle-check", "--config", &cfg], dir.path());
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn runs_do_not_depend_on_thread_count() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    for (threads, name) in [("1", "a"), ("3", "b")] {
        let out = sgoif(&["run", "--config", &cfg, "--threads", threads, "--out", name], dir.path());
        assert!(out.status.success());
    }
    for f in ["metrics.json", "scores_epoch_2.csv", "controller_trace.csv", "solver_trace.csv"] {
        let a = std::fs::read(dir.path().join("a").join(f)).unwrap();
        let b = std::fs::read(dir.path().join("b").join(f)).unwrap();
        assert!(a == b, "{f} differs");
    }
}
