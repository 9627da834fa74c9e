use std::fs;
use std::path::Path;

use assert_cmd::Command;
use s2d_core::checkpoint::Checkpoint;
use s2d_core::linalg::Matrix;
use tempfile::tempdir;

fn s2d() -> Command {
    Command::cargo_bin("s2d").unwrap()
}

fn train(dir: &Path, extra: &[&str]) {
    let mut cmd = s2d();
    cmd.args(["train", "--set", "steps=0", "-o"]).arg(dir);
    for s in extra {
        cmd.args(["--set", s]);
    }
    cmd.assert().success();
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn train_writes_checkpoint_report_and_series() {
    let tmp = tempdir().unwrap();
    let run = tmp.path().join("run");
    train(&run, &[]);
    for f in ["checkpoint.s2d", "report.json", "series.csv"] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    let r = json(&run.join("report.json"));
    assert_eq!(r["config"]["steps"], 0);
    let series = fs::read_to_string(run.join("series.csv")).unwrap();
    assert!(series.starts_with("step,task_loss,layer,sigma_max"));
}

#[test]
fn compare_identical_reports_passes() {
    let tmp = tempdir().unwrap();
    let run = tmp.path().join("run");
    train(&run, &[]);
    let report = run.join("report.json");
    let out = tmp.path().join("cmp.json");
    s2d()
        .args(["compare"])
        .arg(&report)
        .arg(&report)
        .arg("--json")
        .arg(&out)
        .assert()
        .success();
    assert!(json(&out).is_object());
}

#[test]
fn compare_rejects_mismatched_seeds() {
    let tmp = tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    train(&a, &["seed=1"]);
    train(&b, &["seed=2"]);
    s2d()
        .arg("compare")
        .arg(a.join("report.json"))
        .arg(b.join("report.json"))
        .assert()
        .code(1);
}

#[test]
fn quantize_rejects_bad_bits() {
    let tmp = tempdir().unwrap();
    let run = tmp.path().join("run");
    train(&run, &[]);
    s2d()
        .arg("quantize")
        .arg(run.join("checkpoint.s2d"))
        .args(["--bits", "W4X4"])
        .assert()
        .code(1);
}

#[test]
fn quantize_reports_gap() {
    let tmp = tempdir().unwrap();
    let run = tmp.path().join("run");
    train(&run, &[]);
    let out = tmp.path().join("q.json");
    s2d()
        .arg("quantize")
        .arg(run.join("checkpoint.s2d"))
        .args(["--bits", "W8A8", "--calib-samples", "512", "-o"])
        .arg(&out)
        .assert()
        .success();
    let q = json(&out);
    assert_eq!(q["bits"], "W8A8");
    assert!(q["quant_eval_loss"].as_f64().unwrap() > 0.0);
}

#[test]
fn audit_of_identity_tensor() {
    let tmp = tempdir().unwrap();
    let path = tmp.path().join("id.s2d");
    Checkpoint::new(vec![("eye".into(), Matrix::identity(6))])
        .unwrap()
        .write(&path)
        .unwrap();
    let out = tmp.path().join("audit.json");
    s2d()
        .arg("audit")
        .arg(&path)
        .args(["--k-max", "2", "-o"])
        .arg(&out)
        .assert()
        .success();
    let a = json(&out);
    assert_eq!(a["format"], "s2d-audit-report");
    let layer = &a["layers"][0];
    assert_eq!(layer["layer"], "eye");
    assert!((layer["sigma_max"].as_f64().unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn audit_names_missing_tensor() {
    let tmp = tempdir().unwrap();
    let run = tmp.path().join("run");
    train(&run, &[]);
    let out = s2d()
        .arg("audit")
        .arg(run.join("checkpoint.s2d"))
        .args(["--tensor", "nope"])
        .assert()
        .code(1);
    assert!(String::from_utf8_lossy(&out.get_output().stderr).contains("nope"));
}

#[test]
fn sweep_writes_one_row_per_cell() {
    let tmp = tempdir().unwrap();
    let out = tmp.path().join("sweep");
    s2d()
        .args(["sweep", "--set", "steps=0", "--grid", "s2d.n=2,3,4", "-o"])
        .arg(&out)
        .assert()
        .success();
    let csv = fs::read_to_string(out.join("summary.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    assert!(out.join("cell-002.json").exists());
}

#[test]
fn bad_override_exits_one() {
    s2d().args(["train", "--set", "no_such_key=1"]).assert().code(1);
}
