use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn ewhomog(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ewhomog"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env_remove("EWHOMOG_SEED")
        .output()
        .expect("binary runs")
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn selftest_passes() {
    let dir = TempDir::new().unwrap();
    let o = ewhomog(dir.path(), &["selftest", "--set", "diffusivity.blocks=20000"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let m = json(&dir.path().join("manifest.json"));
    assert_eq!(m["command"], "selftest");
    assert_eq!(m["exit_code"], 0);
    for f in ["config.json", "report.json", "records.csv"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
}

#[test]
fn diffusivity_at_zero_coupling_is_the_identity() {
    let dir = TempDir::new().unwrap();
    let o = ewhomog(dir.path(), &["diffusivity", "--lambda", "0", "--blocks", "100000"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let r = json(&dir.path().join("report.json"));
    let a = &r["a_eff"];
    for i in 0..3 {
        for j in 0..3 {
            let v = a["matrix"][i][j].as_f64().unwrap();
            let s = a["stderr"][i][j].as_f64().unwrap();
            let target = if i == j { 1.0 } else { 0.0 };
            assert!((v - target).abs() <= 3.0 * s.max(1e-12), "a_eff[{i}][{j}] = {v} +- {s}");
        }
    }
    assert!(dir.path().join("a_eff.csv").exists());
    assert!(dir.path().join("blocks.csv").exists());
}

#[test]
fn zeta_fit_reports_both_routes() {
    let dir = TempDir::new().unwrap();
    let o = ewhomog(dir.path(), &["zeta-fit", "--lambda", "0.2", "--T", "2,4,6,8,10", "--set", "zeta_fit.samples=20000"]);
    assert!(matches!(o.status.code(), Some(0) | Some(2)), "{}", String::from_utf8_lossy(&o.stderr));
    let fit = &json(&dir.path().join("report.json"))["fit"];
    for key in ["c1_fit", "c1_closed", "c2_fit", "c2_closed"] {
        assert!(fit[key]["value"].is_f64(), "{key}");
        assert!(fit[key]["stderr"].as_f64().unwrap() >= 0.0, "{key}");
    }
    assert!(fit["c1_discrepancy"].as_f64().unwrap() >= 0.0);
    assert_eq!(json(&dir.path().join("report.json"))["points"].as_array().unwrap().len(), 5);
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = TempDir::new().unwrap();
    let o = ewhomog(dir.path(), &["kernels", "--set", "nu_eff.bogus=3"]);
    assert_eq!(o.status.code(), Some(1));
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"lambda": 0.1, "no_such_key": 1}"#).unwrap();
    let o = ewhomog(dir.path(), &["kernels", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn invalid_values_are_rejected() {
    let dir = TempDir::new().unwrap();
    assert_eq!(ewhomog(dir.path(), &["kernels", "--set", "dimension=0"]).status.code(), Some(1));
    assert_eq!(ewhomog(dir.path(), &["kernels", "--set", "lambda"]).status.code(), Some(1));
}

#[test]
fn seed_from_the_environment() {
    let dir = TempDir::new().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_ewhomog"))
        .args(["sample-field", "--out"])
        .arg(dir.path())
        .env("EWHOMOG_SEED", "77")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let m = json(&dir.path().join("manifest.json"));
    assert_eq!(m["master_seed"], 77);
    assert_eq!(json(&dir.path().join("config.json"))["master_seed"], 77);
}

#[test]
fn reruns_are_bit_identical() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    let args = ["nearby-tail", "--lambda", "0.2", "--set", "nearby_tail.samples=300"];
    assert!(matches!(ewhomog(a.path(), &args).status.code(), Some(0) | Some(2)));
    assert!(matches!(ewhomog(b.path(), &args).status.code(), Some(0) | Some(2)));
    let ra = std::fs::read(a.path().join("records.csv")).unwrap();
    let rb = std::fs::read(b.path().join("records.csv")).unwrap();
    assert_eq!(ra, rb);
    assert_eq!(json(&a.path().join("report.json")), json(&b.path().join("report.json")));
    assert_eq!(json(&a.path().join("manifest.json"))["config_hash"], json(&b.path().join("manifest.json"))["config_hash"]);
}
