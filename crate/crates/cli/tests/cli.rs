use std::fs;
use std::path::Path;
use std::process::Command;

const SMALL: &str = r#"
seed = 5
[order]
s = 0.75
[hamiltonian]
m = 2.0
[source]
kind = "power"
c0 = 1.0
gamma = 0.5
[truncation]
radii = [6.0, 12.0, 24.0]
h = 0.25
[discount]
alpha0 = 0.4
levels = 13
[simulation]
dt = 0.05
horizon = 400.0
paths = 400
"#;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ergodic-hjb"))
}

fn write_spec(dir: &Path, text: &str) -> std::path::PathBuf {
    let p = dir.join("spec.toml");
    fs::write(&p, text).unwrap();
    p
}

#[test]
fn malformed_spec_exits_one_without_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = write_spec(tmp.path(), &SMALL.replace("s = 0.75", "s = 1.5"));
    let out = tmp.path().join("out");
    let st = bin().args(["extract", "--spec"]).arg(&spec).arg("--out").arg(&out).status().unwrap();
    assert_eq!(st.code(), Some(1));
    assert!(!out.exists());

    let spec = write_spec(tmp.path(), "[order]\ns = ");
    let st = bin().args(["solve", "--alpha", "0.1", "--spec"]).arg(&spec).arg("--out").arg(&out).status().unwrap();
    assert_eq!(st.code(), Some(1));
    assert!(!out.exists());
}

#[test]
fn solve_is_bit_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = write_spec(tmp.path(), SMALL);
    let mut bodies = Vec::new();
    for k in 0..2 {
        let out = tmp.path().join(format!("run{k}"));
        let st = bin()
            .args(["solve", "--alpha", "0.1", "--exterior", "continuation", "--spec"])
            .arg(&spec)
            .arg("--out")
            .arg(&out)
            .status()
            .unwrap();
        assert!(st.success());
        bodies.push(fs::read(out.join("solution.csv")).unwrap());
        let m: serde_json::Value = serde_json::from_slice(&fs::read(out.join("manifest.json")).unwrap()).unwrap();
        assert_eq!(m["command"], "solve");
        assert_eq!(m["seed"], 5);
    }
    assert_eq!(bodies[0], bodies[1]);
    let text = String::from_utf8(bodies.remove(0)).unwrap();
    assert!(text.lines().count() > 10);
}

#[test]
fn extract_writes_artifacts_and_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = write_spec(tmp.path(), SMALL);
    let out = tmp.path().join("out");
    let st = bin().args(["extract", "--spec"]).arg(&spec).arg("--out").arg(&out).status().unwrap();
    assert!(st.success());
    for f in ["eigenpair.csv", "lambda_table.csv", "certificate.csv", "validation.csv", "manifest.json"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let m: serde_json::Value = serde_json::from_slice(&fs::read(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["outputs"].as_array().unwrap().len(), 4);
}

#[test]
fn simulate_same_seed_same_bytes() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = write_spec(tmp.path(), SMALL);
    let mut bodies = Vec::new();
    for k in 0..2 {
        let out = tmp.path().join(format!("sim{k}"));
        let st = bin()
            .args(["simulate", "--policy", "zero", "--seed", "9", "--spec"])
            .arg(&spec)
            .arg("--out")
            .arg(&out)
            .status()
            .unwrap();
        assert!(st.success());
        bodies.push(fs::read(out.join("estimate.csv")).unwrap());
    }
    assert_eq!(bodies[0], bodies[1]);
}

#[test]
fn verify_subset_passes_and_bad_suite_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = write_spec(tmp.path(), SMALL);
    let out = tmp.path().join("verify");
    let st = bin()
        .args(["verify", "--suite", "fuzz,shift", "--seed", "0", "--spec"])
        .arg(&spec)
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert!(st.success());
    let report = fs::read_to_string(out.join("verify_report.csv")).unwrap();
    assert_eq!(report.lines().count(), 3);
    assert!(report.lines().skip(1).all(|l| l.contains(",pass,")));

    let out = tmp.path().join("bad");
    let st =
        bin().args(["verify", "--suite", "fuzz,nope", "--spec"]).arg(&spec).arg("--out").arg(&out).status().unwrap();
    assert_eq!(st.code(), Some(1));
    assert!(!out.exists());
}
