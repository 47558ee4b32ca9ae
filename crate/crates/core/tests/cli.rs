use std::path::Path;
use std::process::{Command, Output};

fn gfom_lab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gfom-lab")).args(args).output().expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn listings() {
    let out = gfom_lab(&["list-programs"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("tanh_amp") && text.contains("gd_ridge"));
    let out = gfom_lab(&["list-experiments"]);
    assert!(String::from_utf8(out.stdout).unwrap().contains("gd_gaussianity"));
}

#[test]
fn invalid_configs_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let neg = write(
        dir.path(),
        "neg.json",
        r#"{"experiment": "universality_averaged", "program": {"key": "tanh_amp"}, "n": -5, "horizon": 2}"#,
    );
    assert_eq!(gfom_lab(&["validate", "--config", &neg]).status.code(), Some(2));
    let unknown = write(
        dir.path(),
        "unknown.json",
        r#"{"experiment": "universality_averaged", "program": {"key": "tanh_amp"}, "n": 5, "horizon": 2, "bogus": 1}"#,
    );
    assert_eq!(gfom_lab(&["validate", "--config", &unknown]).status.code(), Some(2));
    assert_eq!(gfom_lab(&["validate", "--config", "/nonexistent/config.json"]).status.code(), Some(2));
}

#[test]
fn run_writes_outputs_and_reports_tolerance_failures() {
    let dir = tempfile::tempdir().unwrap();
    let ok = write(
        dir.path(),
        "ok.json",
        r#"{"experiment": "se_vs_simulation", "program": {"key": "tanh_amp"}, "n": 300, "horizon": 2,
            "replicates": 6, "tolerance": 0.1, "seed": 4}"#,
    );
    let out_dir = dir.path().join("ok");
    let out = gfom_lab(&["run", "--config", &ok, "--out", out_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["config.json", "manifest.json", "report.csv", "plot.csv", "summary.json"] {
        assert!(out_dir.join(f).exists(), "{f}");
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["master_seed"], 4);

    let strict = write(
        dir.path(),
        "strict.json",
        r#"{"experiment": "universality_averaged", "program": {"key": "tanh_gfom"}, "law_b": {"kind": "rademacher"},
            "n": 100, "horizon": 2, "replicates": 4, "tolerance": 0.0}"#,
    );
    let out = gfom_lab(&["run", "--config", &strict, "--out", dir.path().join("strict").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn dry_run_skips_computation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "c.json",
        r#"{"experiment": "universality_averaged", "program": {"key": "tanh_amp"}, "n": 100000, "horizon": 50}"#,
    );
    let out_dir = dir.path().join("dry");
    let out = gfom_lab(&["run", "--config", &cfg, "--out", out_dir.to_str().unwrap(), "--dry-run"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(out_dir.join("manifest.json").exists());
    assert!(!out_dir.join("report.csv").exists());
}
