use std::path::{Path, PathBuf};
use std::process::Command;

fn model(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../models").join(name)
}

fn run(args: &[&str]) -> i32 {
    Command::new(env!("CARGO_BIN_EXE_kamrev2")).args(args).output().unwrap().status.code().unwrap()
}

fn read(p: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn solve_writes_transform_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let m = model("forced_oscillator.json");
    assert_eq!(run(&["solve", "--model", m.to_str().unwrap(), "--out", out, "--fourier", "4"]), 0);
    let t = read(&dir.path().join("transform.json"));
    assert!((t["v"][0].as_f64().unwrap() + 3e-3).abs() < 1e-12);
    let manifest = read(&dir.path().join("run_manifest.json"));
    assert_eq!(manifest["exit_code"], 0);
    assert_eq!(manifest["outputs"][0]["file"], "transform.json");
}

#[test]
fn runs_are_byte_identical() {
    let m = model("circle_rotation.json");
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        let args = ["sweep", "--model", m.to_str().unwrap(), "--out", d.path().to_str().unwrap(), "--grid", "9", "--fourier", "3"];
        assert_eq!(run(&args), 0);
    }
    for f in ["family.json", "measures.csv", "theta.csv", "long.csv", "whitney.json"] {
        let a = std::fs::read(dirs[0].path().join(f)).unwrap();
        let b = std::fs::read(dirs[1].path().join(f)).unwrap();
        assert_eq!(a, b, "{f}");
    }
    let ma = read(&dirs[0].path().join("run_manifest.json"));
    let mb = read(&dirs[1].path().join("run_manifest.json"));
    assert_eq!(ma["outputs"], mb["outputs"]);
}

#[test]
fn exit_codes_follow_failure_kind() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let m = model("full_family.json");
    let m = m.to_str().unwrap();
    assert_eq!(run(&["dioph", "--model", m, "--out", out, "--gamma", "0.9"]), 4);
    assert_eq!(read(&dir.path().join("dioph.json"))["verdict"], "fail");
    assert_eq!(run(&["validate", "--model", m, "--out", out]), 0);
    assert_eq!(run(&["validate", "--model", "/nonexistent.json", "--out", out]), 2);
    assert_eq!(run(&["solve", "--model", m, "--out", out, "--set", "bogus=1"]), 2);
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"dims": {"n": 0, "m": 1, "p": 0, "N": 1, "s": 1}, "omega": [1.0, 2.0], "fields": {}}"#).unwrap();
    assert_eq!(run(&["validate", "--model", bad.to_str().unwrap(), "--out", out]), 2);
}

#[test]
fn rational_forcing_fails_dioph_with_witness() {
    let dir = tempfile::tempdir().unwrap();
    let m = dir.path().join("rational.json");
    std::fs::write(&m, r#"{"dims": {"n": 0, "m": 1, "p": 0, "N": 2, "s": 1}, "omega": [1.0, 2.0], "fields": {}}"#).unwrap();
    let out = dir.path().join("out");
    assert_eq!(run(&["dioph", "--model", m.to_str().unwrap(), "--out", out.to_str().unwrap()]), 4);
    let rep = read(&out.join("dioph.json"));
    let k: Vec<i64> = serde_json::from_value(rep["worst_k"].clone()).unwrap();
    assert_eq!(k[0] + 2 * k[1], 0);
    assert!(out.join("run_manifest.json").exists());
}

#[test]
fn unperturbed_sweep_has_zero_theta_column() {
    let dir = tempfile::tempdir().unwrap();
    let m = dir.path().join("flat.json");
    std::fs::write(
        &m,
        r#"{"dims": {"n": 1, "m": 1, "p": 0, "N": 1, "s": 1}, "omega": [0.6180339887498949],
            "fields": {"F": [{"c": [1.0]}, {"d": {"mu": [1]}, "c": [1.0]}]}}"#,
    )
    .unwrap();
    let out = dir.path().join("out");
    assert_eq!(run(&["sweep", "--model", m.to_str().unwrap(), "--out", out.to_str().unwrap(), "--grid", "21"]), 0);
    let mut rdr = csv::Reader::from_path(out.join("theta.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = rdr.records().map(|r| r.unwrap()).collect();
    assert!(!rows.is_empty());
    assert!(rows.iter().all(|r| r[1].parse::<f64>().unwrap() == 0.0));
}
