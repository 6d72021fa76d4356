//! End-to-end checks of the `eit` binary: exit codes, output shapes, seeded
//! determinism, and manifest plumbing. All runs share one small mesh.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_eit")
}

fn run(args: &[&str]) -> Output {
    Command::new(bin()).args(args).output().expect("spawn eit")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

/// Shared temp dir holding a small mesh and a noiseless data set.
fn work() -> &'static PathBuf {
    static DIR: OnceLock<(tempfile::TempDir, PathBuf)> = OnceLock::new();
    &DIR.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().to_path_buf();
        let mesh = path.join("mesh.txt");
        let out = run(&["mesh", "--target-elements", "300", "--out", mesh.to_str().unwrap()]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let data = path.join("data.csv");
        let out = run(&[
            "simulate",
            "--mesh",
            mesh.to_str().unwrap(),
            "--out",
            data.to_str().unwrap(),
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        (dir, path)
    })
    .1
}

fn mesh_path() -> String {
    work().join("mesh.txt").to_str().unwrap().into()
}

fn data_path() -> String {
    work().join("data.csv").to_str().unwrap().into()
}

#[test]
fn mesh_reports_coverage_near_61_percent() {
    let dir = tempfile::tempdir().unwrap();
    let out_file = dir.path().join("m.txt");
    let out = run(&[
        "mesh",
        "--radius",
        "0.1",
        "--electrodes",
        "16",
        "--half-width",
        "0.12",
        "--target-elements",
        "7726",
        "--out",
        out_file.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let text = stdout(&out);
    let cov: f64 = text
        .split("coverage ")
        .nth(1)
        .and_then(|s| s.trim_end().trim_end_matches('%').parse().ok())
        .unwrap_or_else(|| panic!("no coverage in: {text}"));
    assert!((cov - 61.0).abs() < 1.0, "coverage {cov}%");
    assert!(out_file.with_extension("txt.manifest.json").exists() || manifest_of(&out_file).exists());
}

fn manifest_of(out: &Path) -> PathBuf {
    PathBuf::from(format!("{}.manifest.json", out.display()))
}

#[test]
fn missing_flag_is_usage_error_exit_2() {
    let out = run(&["mesh"]); // --out is required
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn infeasible_layout_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out_file = dir.path().join("m.txt");
    let out = run(&["mesh", "--target-elements", "10", "--out", out_file.to_str().unwrap()]);
    assert_ne!(out.status.code(), Some(0));
}

#[test]
fn simulate_writes_256_rows_and_is_deterministic() {
    let text = std::fs::read_to_string(data_path()).unwrap();
    let rows = text.lines().filter(|l| !l.trim().is_empty()).count();
    // 16 drive rotations x 16 electrodes, plus header
    assert_eq!(rows, 257, "data rows: {rows}");

    let dir = tempfile::tempdir().unwrap();
    let again = dir.path().join("again.csv");
    let out = run(&["simulate", "--mesh", &mesh_path(), "--out", again.to_str().unwrap()]);
    assert!(out.status.success());
    assert_eq!(std::fs::read(&again).unwrap(), std::fs::read(data_path()).unwrap());
}

#[test]
fn seeded_noise_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    for f in [&a, &b] {
        let out = run(&[
            "simulate",
            "--mesh",
            &mesh_path(),
            "--noise-pct",
            "1",
            "--seed",
            "7",
            "--out",
            f.to_str().unwrap(),
        ]);
        assert!(out.status.success());
    }
    let bytes = std::fs::read(&a).unwrap();
    assert_eq!(bytes, std::fs::read(&b).unwrap());
    // and noise actually changed the data
    assert_ne!(bytes, std::fs::read(data_path()).unwrap());
}

#[test]
fn invert_rejects_unknown_config_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"n_mxa": 5}"#).unwrap();
    let out = run(&["invert", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("n_mxa"), "stderr: {err}");
}

#[test]
fn kappa_cheap_sigma_plateaus() {
    let dir = tempfile::tempdir().unwrap();
    let out_file = dir.path().join("kappa.csv");
    let out = run(&[
        "kappa",
        "--mesh",
        &mesh_path(),
        "--data",
        &data_path(),
        "--mode",
        "cheap",
        "--space",
        "sigma",
        "--out",
        out_file.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&out_file).unwrap();
    let close_rows = text
        .lines()
        .skip(1)
        .filter_map(|l| l.split(',').nth(1)?.parse::<f64>().ok())
        .filter(|k| (k - 1.0).abs() <= 1e-3)
        .count();
    assert!(close_rows >= 4, "only {close_rows} rows with |kappa-1| <= 1e-3:\n{text}");
    assert!(manifest_of(&out_file).exists());
}

#[test]
fn kappa_expensive_row_per_component_and_cheap_xi_single_component() {
    // a 1-component PCA basis keeps the expensive sweep tiny
    let dir = tempfile::tempdir().unwrap();
    let basis = dir.path().join("basis.bin");
    let out = run(&[
        "pca-build",
        "--mesh",
        &mesh_path(),
        "--realizations",
        "20",
        "--out",
        basis.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let out_file = dir.path().join("exp.csv");
    let out = run(&[
        "kappa",
        "--mesh",
        &mesh_path(),
        "--data",
        &data_path(),
        "--mode",
        "expensive",
        "--space",
        "xi",
        "--basis",
        basis.to_str().unwrap(),
        "--components",
        "3",
        "--epsilon",
        "1e-8",
        "--out",
        out_file.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = std::fs::read_to_string(&out_file).unwrap().lines().count() - 1;
    assert_eq!(rows, 3, "expected one row per component");

    let cheap1 = dir.path().join("cheap1.csv");
    let out = run(&[
        "kappa",
        "--mesh",
        &mesh_path(),
        "--data",
        &data_path(),
        "--mode",
        "cheap",
        "--space",
        "xi",
        "--basis",
        basis.to_str().unwrap(),
        "--components",
        "1",
        "--out",
        cheap1.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn invert_fine_only_writes_history_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let run_dir = dir.path().join("run");
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"max_iterations": 30}"#).unwrap();
    let out = run(&[
        "invert",
        "--config",
        cfg.to_str().unwrap(),
        "--mesh",
        &mesh_path(),
        "--basis",
        &build_small_basis(dir.path()),
        "--data",
        &data_path(),
        "--fine-only",
        "--out-dir",
        run_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(run_dir.join("history.csv").exists());
    assert!(run_dir.join("fine_field.csv").exists());
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run_dir.join("manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["command"], "invert");
    assert!(manifest["outputs"].as_array().unwrap().iter().any(|o| o == "history.csv"));
}

fn build_small_basis(dir: &Path) -> String {
    let basis = dir.join("inv_basis.bin");
    let out = run(&[
        "pca-build",
        "--mesh",
        &mesh_path(),
        "--realizations",
        "30",
        "--out",
        basis.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    basis.to_str().unwrap().into()
}
