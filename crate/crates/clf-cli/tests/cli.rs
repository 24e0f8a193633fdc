//! End-to-end CLI checks: exit codes, artifact layout, flag precedence.

use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_zubov-clf"))
}

fn tmp(name: &str) -> std::path::PathBuf {
    let dir = std::env::temp_dir().join("zubov_clf_cli_tests").join(name);
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

#[test]
fn version_includes_git_hash() {
    let out = bin().arg("--version").output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains('+'), "version must carry the git hash: {text}");
}

#[test]
fn qclf_smtlib_writes_certificate_and_query() {
    let dir = tmp("qclf_smtlib");
    let out = bin()
        .args([
            "qclf",
            "--benchmark",
            "vdp_input",
            "--backend",
            "smtlib",
            "--out",
            dir.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.join("certificate.json").exists());
    assert!(dir.join("vdp_input_global_clf.smt2").exists());
    let query = std::fs::read_to_string(dir.join("vdp_input_global_clf.smt2")).unwrap();
    assert!(query.contains("(set-logic QF_NRA)"));
    assert!(query.contains("(check-sat)"));
}

#[test]
fn verify_without_certificate_is_usage_error() {
    let dir = tmp("verify_missing");
    let out = bin()
        .args([
            "verify",
            "--benchmark",
            "reversed_vdp",
            "--model",
            dir.join("model.json").to_str().unwrap(),
            "--delta",
            "1e-4",
            "--out",
            dir.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn unknown_benchmark_is_usage_error() {
    let dir = tmp("unknown_bench");
    let out = bin()
        .args(["qclf", "--benchmark", "lorenz", "--out", dir.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn flags_override_config_file_and_echo() {
    let dir = tmp("precedence");
    let config = dir.join("config_in.json");
    std::fs::write(
        &config,
        format!(
            "{{\"benchmark\": \"reversed_vdp\", \"seed\": 1, \"out_dir\": \"{}\", \"pmp\": {{\"n_samples\": 4, \"T\": 30.0, \"N\": 300}}}}",
            dir.to_str().unwrap().replace('\\', "/")
        ),
    )
    .unwrap();
    let out = bin()
        .args([
            "pmp-data",
            "--config",
            config.to_str().unwrap(),
            "--seed",
            "9",
            "--pmp.n_samples",
            "2",
            "--pmp.domain",
            "[[-1,1],[-1,1]]",
            "--threads",
            "2",
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let echoed: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("config.json")).unwrap())
            .unwrap();
    assert_eq!(echoed["seed"], 9, "flag must beat config file");
    assert_eq!(echoed["pmp"]["n_samples"], 2);
    assert_eq!(echoed["pmp"]["T"], 30.0, "config value kept where no flag given");
    assert!(dir.join("dataset.jsonl").exists());
    assert!(dir.join("dataset_config.json").exists());
}

#[test]
fn export_grid_requires_a_source() {
    let dir = tmp("grid_no_source");
    let out = bin()
        .args([
            "export-grid",
            "--benchmark",
            "reversed_vdp",
            "--out",
            dir.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn qclf_then_grid_export() {
    let dir = tmp("qclf_grid");
    let status = bin()
        .args([
            "qclf",
            "--benchmark",
            "vdp_input",
            "--backend",
            "smtlib",
            "--out",
            dir.to_str().unwrap(),
        ])
        .status()
        .unwrap();
    assert!(status.success());
    let out = bin()
        .args([
            "export-grid",
            "--benchmark",
            "vdp_input",
            "--cert",
            dir.join("certificate.json").to_str().unwrap(),
            "--resolution",
            "20",
            "--levels",
            "1.0,2.0",
            "--grid-box",
            "[[-4,4],[-4,4]]",
            "--out",
            dir.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.join("grids/quadratic.csv")).unwrap();
    assert!(csv.starts_with("x1,x2,value\n"));
    assert_eq!(csv.lines().count(), 401);
    assert!(Path::new(&dir.join("grids/quadratic.json")).exists());
}
