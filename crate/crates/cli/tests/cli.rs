use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fvnce(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fvnce"))
        .args(args)
        .output()
        .expect("spawn fvnce")
}

fn smoke_config() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.json")
}

fn arg(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "status {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn curves_writes_grid() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("c.csv");
    assert_ok(&fvnce(&[
        "curves",
        "--alpha",
        "0.5",
        "--beta",
        "1",
        "--out",
        arg(&file),
    ]));
    let text = fs::read_to_string(&file).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap();
    assert!(header.contains("S1") && header.contains("S0"), "{header}");
    assert_eq!(lines.count(), 33);
}

#[test]
fn curves_rejects_bad_alpha() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("c.csv");
    let out = fvnce(&["curves", "--alpha", "2", "--beta", "0", "--out", arg(&file)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn verify_passes_and_reports() {
    let dir = tempfile::tempdir().unwrap();
    let out = fvnce(&["verify", "--out", arg(dir.path()), "--threads", "2"]);
    assert_ok(&out);
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(report["passed"], serde_json::Value::Bool(true));
}

#[test]
fn train_then_reconstruct() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    assert_ok(&fvnce(&[
        "train",
        "--config",
        arg(&smoke_config()),
        "--seed",
        "4",
        "--out",
        arg(&run),
    ]));
    let metrics = fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 1 + 4);
    let rec = dir.path().join("rec");
    assert_ok(&fvnce(&[
        "reconstruct",
        "--checkpoint",
        arg(&run.join("checkpoint.bin")),
        "--count",
        "9",
        "--out",
        arg(&rec),
    ]));
    for f in ["inputs.pgm", "reconstructions.pgm"] {
        assert!(fs::read(rec.join(f)).unwrap().starts_with(b"P5"));
    }
    assert_eq!(
        fs::read_to_string(rec.join("loglik.csv"))
            .unwrap()
            .lines()
            .count(),
        10
    );
}

#[test]
fn sweep_writes_table() {
    let dir = tempfile::tempdir().unwrap();
    let out = fvnce(&[
        "sweep",
        "--config",
        arg(&smoke_config()),
        "--methods",
        "ae,vae,(1/64,0)",
        "--out",
        arg(dir.path()),
    ]);
    assert_ok(&out);
    let table = fs::read_to_string(dir.path().join("table.csv")).unwrap();
    assert_eq!(table.lines().count(), 4);
    assert!(String::from_utf8_lossy(&out.stdout).contains("(1/64,0)"));
}

#[test]
fn bad_config_exits_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"epochs": 1, "not_a_field": 3}"#).unwrap();
    let out = fvnce(&["train", "--config", arg(&cfg), "--out", arg(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
}
