use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_entk-dmft"));
    c.env_remove("ENTK_DMFT_THREADS");
    c
}

fn write_config(dir: &Path, text: &str) -> std::path::PathBuf {
    let p = dir.join("config.json");
    std::fs::write(&p, text).unwrap();
    p
}

fn run(args: &[&str], cfg: &Path, out: &Path, env: Option<(&str, &str)>) -> Output {
    let mut c = bin();
    c.args(args).arg("--config").arg(cfg).arg("--out").arg(out);
    if let Some((k, v)) = env {
        c.env(k, v);
    }
    c.output().unwrap()
}

fn manifest(out: &Path) -> serde_json::Value {
    serde_json::from_slice(&std::fs::read(out.join("manifest.json")).unwrap()).unwrap()
}

const DMFT: &str = r#"{
    "dataset": {"kind": "random_gaussian", "p": 3, "d": 6},
    "network": {"depth": 1, "gamma0": 1.0, "activation": "relu"},
    "rule": {"tag": "gd"},
    "grid": {"steps": 6, "dt": 0.1},
    "solver": {"samples": 300, "max_iters": MAX, "tol": TOL}
}"#;

#[test]
fn unknown_mode_exits_one_with_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "{}");
    let o = run(&["bogus"], &cfg, &dir.path().join("out"), None);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown mode"));
}

#[test]
fn missing_config_and_schema_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["lazy"], &dir.path().join("absent.json"), dir.path(), None);
    assert_eq!(o.status.code(), Some(1));
    let cfg = write_config(dir.path(), r#"{"grid": {"steps": "many", "dt": 0.1}}"#);
    let o = run(&["lazy"], &cfg, dir.path(), None);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("grid.steps"));
}

#[test]
fn missing_flag_exits_one() {
    let o = bin().arg("lazy").output().unwrap();
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn exact2_writes_trajectory() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        r#"{"network": {"depth": 1, "gamma0": 1.0, "activation": "linear"},
            "rule": {"tag": "rho_fa", "rho": 0.0},
            "grid": {"steps": 2001, "dt": 0.02},
            "exact": {"y": 1.5}}"#,
    );
    let out = dir.path().join("out");
    let o = run(&["exact2"], &cfg, &out, None);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(out.join("trajectory.csv")).unwrap();
    let last = text.lines().last().unwrap();
    let hy: f64 = last.split(',').nth(3).unwrap().parse().unwrap();
    assert!((hy - 2.0).abs() < 1e-6);
    assert_eq!(manifest(&out)["outputs"].as_array().unwrap().len(), 2);
}

#[test]
fn non_convergence_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &DMFT.replace("MAX", "1").replace("TOL", "1e-12"));
    let out = dir.path().join("out");
    let o = run(&["dmft"], &cfg, &out, None);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(manifest(&out)["convergence"]["dmft"], false);
}

#[test]
fn results_do_not_depend_on_thread_count() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &DMFT.replace("MAX", "30").replace("TOL", "1e-3"));
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let oa = run(&["dmft", "--threads", "1", "--seed", "5"], &cfg, &a, None);
    let ob = run(&["dmft", "--seed", "5"], &cfg, &b, Some(("ENTK_DMFT_THREADS", "3")));
    assert_eq!(oa.status.code(), Some(0), "{}", String::from_utf8_lossy(&oa.stderr));
    assert_eq!(ob.status.code(), Some(0));
    assert_eq!(manifest(&a)["content_hash"], manifest(&b)["content_hash"]);
    assert_eq!(manifest(&a)["config_hash"], manifest(&b)["config_hash"]);
}

#[test]
fn invalid_thread_env_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "{}");
    let o = run(&["lazy"], &cfg, dir.path(), Some(("ENTK_DMFT_THREADS", "zero")));
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("ENTK_DMFT_THREADS"));
}
