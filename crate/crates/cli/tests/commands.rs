use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn momix(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_momix"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn rows(path: &Path) -> Vec<Vec<f64>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect()
}

#[test]
fn generate_writes_data_and_truth() {
    let dir = TempDir::new().unwrap();
    let stdout = ok(&momix(
        dir.path(),
        &[
            "generate",
            "--model",
            "gaussian-diag",
            "--k",
            "2",
            "--d",
            "2",
            "--samples",
            "1000",
            "--seed",
            "7",
            "--out",
            "data.csv",
            "--truth",
            "truth.json",
        ],
    ));
    assert!(stdout.contains("data.csv") && stdout.contains("truth.json"));
    let data = rows(&dir.path().join("data.csv"));
    assert_eq!(data.len(), 1000);
    assert!(data.iter().all(|r| r.len() == 2));
    let truth: Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("truth.json")).unwrap()).unwrap();
    assert_eq!(truth["components"].as_array().unwrap().len(), 2);
}

#[test]
fn binomial_counts_are_integers_in_range() {
    let dir = TempDir::new().unwrap();
    ok(&momix(
        dir.path(),
        &[
            "generate",
            "--model",
            "binomial",
            "--m",
            "10",
            "--k",
            "2",
            "--samples",
            "500",
            "--out",
            "b.csv",
        ],
    ));
    for r in rows(&dir.path().join("b.csv")) {
        assert_eq!(r.len(), 1);
        assert!(r[0].fract() == 0.0 && (0.0..=10.0).contains(&r[0]));
    }
    assert!(dir.path().join("b.truth.json").exists());
}

#[test]
fn missing_k_is_a_usage_error() {
    let dir = TempDir::new().unwrap();
    let out = momix(
        dir.path(),
        &[
            "generate",
            "--model",
            "binomial",
            "--samples",
            "10",
            "--out",
            "x.csv",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(!dir.path().join("x.csv").exists());
}

#[test]
fn sdp_fit_reports_certificate_and_eval_agrees() {
    let dir = TempDir::new().unwrap();
    ok(&momix(
        dir.path(),
        &[
            "generate",
            "--model",
            "gaussian-diag",
            "--k",
            "2",
            "--d",
            "2",
            "--samples",
            "1000",
            "--seed",
            "7",
            "--out",
            "data.csv",
            "--truth",
            "truth.json",
        ],
    ));
    ok(&momix(
        dir.path(),
        &[
            "fit",
            "--data",
            "data.csv",
            "--model",
            "gaussian-diag",
            "--k",
            "2",
            "--solver",
            "sdp",
            "--truth",
            "truth.json",
            "--seed",
            "1",
            "--out",
            "fit.json",
        ],
    ));
    let report: Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("fit.json")).unwrap()).unwrap();
    assert!(report.get("certificate_rank").is_some());
    let reported = report["relative_error"].as_f64().unwrap();
    let printed: f64 = ok(&momix(
        dir.path(),
        &["eval", "--estimate", "fit.json", "--truth", "truth.json"],
    ))
    .trim()
    .parse()
    .unwrap();
    assert_eq!(printed, reported);
}

#[test]
fn multiview_auto_takes_the_corner_path() {
    let dir = TempDir::new().unwrap();
    ok(&momix(
        dir.path(),
        &[
            "generate",
            "--model",
            "multiview",
            "--k",
            "3",
            "--d",
            "3",
            "--samples",
            "20000",
            "--seed",
            "3",
            "--out",
            "m.csv",
        ],
    ));
    let stdout = ok(&momix(
        dir.path(),
        &[
            "fit",
            "--data",
            "m.csv",
            "--model",
            "multiview",
            "--k",
            "3",
            "--solver",
            "auto",
        ],
    ));
    let report: Value = serde_json::from_str(&stdout).unwrap();
    assert_eq!(report["path"], "multiview-corner");
}

#[test]
fn corrupt_csv_is_an_input_error_without_output() {
    let dir = TempDir::new().unwrap();
    fs::write(dir.path().join("bad.csv"), "1,2\n3,x\n").unwrap();
    let out = momix(
        dir.path(),
        &[
            "fit",
            "--data",
            "bad.csv",
            "--model",
            "gaussian-diag",
            "--k",
            "1",
            "--out",
            "r.json",
        ],
    );
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));
    assert!(!dir.path().join("r.json").exists());
}

#[test]
fn eval_of_truth_against_itself_is_zero() {
    let dir = TempDir::new().unwrap();
    ok(&momix(
        dir.path(),
        &[
            "generate",
            "--model",
            "gaussian-spherical",
            "--k",
            "2",
            "--d",
            "2",
            "--samples",
            "10",
            "--out",
            "s.csv",
        ],
    ));
    let stdout = ok(&momix(
        dir.path(),
        &[
            "eval",
            "--estimate",
            "s.truth.json",
            "--truth",
            "s.truth.json",
        ],
    ));
    assert_eq!(stdout.trim(), "0.0");
}

#[test]
fn experiment_rejects_zero_trials_and_unknown_keys() {
    let dir = TempDir::new().unwrap();
    fs::write(
        dir.path().join("zero.json"),
        r#"{"model":"gaussian-spherical","k":2,"d":2,"samples":[1000],"trials":0}"#,
    )
    .unwrap();
    fs::write(
        dir.path().join("extra.json"),
        r#"{"model":"gaussian-spherical","k":2,"d":2,"samples":[1000],"trials":1,"colour":1}"#,
    )
    .unwrap();
    for cfg in ["zero.json", "extra.json"] {
        let out = momix(dir.path(), &["experiment", "--config", cfg]);
        assert_eq!(out.status.code(), Some(3), "{cfg}");
        assert!(out.stdout.is_empty());
    }
}

#[test]
fn experiment_json_is_reproducible() {
    let dir = TempDir::new().unwrap();
    fs::write(
        dir.path().join("exp.json"),
        r#"{"model":"gaussian-spherical","k":2,"d":2,"samples":[1000],"trials":2,"methods":["poly","em"]}"#,
    )
    .unwrap();
    let a = ok(&momix(
        dir.path(),
        &["experiment", "--config", "exp.json", "--seed", "4"],
    ));
    let b = ok(&momix(
        dir.path(),
        &["experiment", "--config", "exp.json", "--seed", "4"],
    ));
    assert_eq!(a, b);
    let report: Value = serde_json::from_str(&a).unwrap();
    assert_eq!(report["rows"].as_array().unwrap().len(), 2);
}
