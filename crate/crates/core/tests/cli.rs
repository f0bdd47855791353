use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_l1cavity"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn data_lines(text: &str) -> Vec<&str> {
    text.lines().filter(|l| !l.starts_with('#')).collect()
}

#[test]
fn boundary_grid_gives_one_row_per_rho() {
    let out = run(&["boundary", "--rho-grid", "0.1:0.9:0.1", "--seed", "1"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    let lines = data_lines(&text);
    assert_eq!(lines[0], "rho,alpha_c,tol_alpha,alpha_c_linear");
    assert_eq!(lines.len(), 10);
    let row2: Vec<&str> = lines[2].split(',').collect();
    assert_eq!(row2[0], "0.2");
    let ac: f64 = row2[1].parse().unwrap();
    assert!((ac - 0.51).abs() < 0.02);
}

#[test]
fn repeated_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    let args = ["experiment", "--n", "80", "--k", "16", "--alpha", "0.35", "--instances", "3", "--seed", "1"];
    let s1 = bin().args(args).args(["--out", a.to_str().unwrap()]).env("L1CAVITY_WORKERS", "1").status().unwrap();
    let s2 = bin().args(args).args(["--out", b.to_str().unwrap()]).env("L1CAVITY_WORKERS", "4").status().unwrap();
    assert!(s1.success() && s2.success());
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let names: Vec<_> = std::fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(names.len(), 2, "temporary files left behind: {names:?}");
}

#[test]
fn json_report_replays_through_config() {
    let dir = tempfile::tempdir().unwrap();
    let first = run(&["susceptibility", "--n", "40", "--m", "20", "--seeds", "2", "--seed", "9", "--format", "json"]);
    assert_eq!(first.status.code(), Some(0));
    let doc: serde_json::Value = serde_json::from_slice(&first.stdout).unwrap();
    let cfg_path = dir.path().join("cfg.json");
    std::fs::write(&cfg_path, doc["config"].to_string()).unwrap();
    let again = run(&["susceptibility", "--config", cfg_path.to_str().unwrap()]);
    assert_eq!(again.status.code(), Some(0));
    assert_eq!(first.stdout, again.stdout);
}

#[test]
fn meanfield_near_critical_point() {
    let out = run(&["meanfield", "--rho", "0.2", "--alpha", "0.51", "--bp-limit"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    let row: Vec<&str> = data_lines(&text)[1].split(',').collect();
    assert_eq!(row[6], "true");
    let q: f64 = row[2].parse().unwrap();
    assert!(q > 0.0 && q < 1e-3, "q = {q}");
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"command":{"name":"boundary","params":{"rho_grd":[0.2]}}}"#).unwrap();
    let out = run(&["boundary", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("rho_grd") && err.contains("line"), "{err}");

    assert_eq!(run(&["boundary", "--rho-grid", "0.5:0.1:0.1"]).status.code(), Some(2));
    assert_eq!(run(&["experiment", "--k", "500"]).status.code(), Some(2));
    assert_eq!(run(&["nonsense"]).status.code(), Some(2));
    let out = bin().args(["boundary", "--rho-grid", "0.2"]).env("L1CAVITY_WORKERS", "zero").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn partial_runs_exit_with_one_and_write_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out_path = dir.path().join("mf.csv");
    let out = run(&["meanfield", "--alpha", "0.3,0.6", "--tol", "1e-300", "--out", out_path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let text = std::fs::read_to_string(&out_path).unwrap();
    assert_eq!(data_lines(&text).len(), 3);
    let manifest = Path::new(&format!("{}.failures.json", out_path.display())).to_path_buf();
    let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(manifest).unwrap()).unwrap();
    let unconverged = data_lines(&text).iter().skip(1).filter(|l| l.split(',').nth(6) == Some("false")).count();
    assert!(unconverged > 0);
    assert_eq!(m["failures"].as_array().unwrap().len(), unconverged);
}

#[test]
fn help_exits_cleanly() {
    let out = run(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8(out.stdout).unwrap().contains("boundary"));
}
