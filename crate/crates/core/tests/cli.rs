use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use serde_json::Value;

const RM1: &str = include_str!("../models/rm1.json");

fn pdmp(args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_pdmp"))
        .args(args)
        .output()
        .unwrap();
    let text =
        String::from_utf8_lossy(&out.stdout).into_owned() + &String::from_utf8_lossy(&out.stderr);
    (out.status.code().unwrap(), text)
}

fn write_model(dir: &Path, name: &str, edit: impl FnOnce(&mut Value)) -> PathBuf {
    let mut doc: Value = serde_json::from_str(RM1).unwrap();
    edit(&mut doc);
    let path = dir.join(name);
    fs::write(&path, serde_json::to_string_pretty(&doc).unwrap()).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn validate_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let good = write_model(dir.path(), "rm1.json", |_| {});
    let out = dir.path().join("v");
    let (code, text) = pdmp(&["validate", "--model", s(&good), "--out", s(&out)]);
    assert_eq!(code, 0, "{text}");
    let report: Value =
        serde_json::from_str(&fs::read_to_string(out.join("validation_report.json")).unwrap())
            .unwrap();
    assert!(report["checks"]
        .as_array()
        .unwrap()
        .iter()
        .all(|c| c["passed"] == true));

    let zero = write_model(dir.path(), "zero.json", |d| {
        d["costs"]["intervention"]["table"][0][1] = Value::from("0");
    });
    let (code, text) = pdmp(&["validate", "--model", s(&zero), "--out", s(&out)]);
    assert_eq!(code, 2, "{text}");
    assert!(text.contains("FAIL"));

    let missing = dir.path().join("nope.json");
    assert_eq!(
        pdmp(&["validate", "--model", s(&missing), "--out", s(&out)]).0,
        1
    );
}

#[test]
fn compute_value_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let model = write_model(dir.path(), "rm1.json", |_| {});
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let (code, text) = pdmp(&[
            "compute-value",
            "--model",
            s(&model),
            "--out",
            s(out),
            "--grid",
            "30",
            "--x0",
            "1:2",
        ]);
        assert_eq!(code, 0, "{text}");
    }
    for f in ["value.pdmpval", "summary.csv"] {
        assert_eq!(
            fs::read(a.join(f)).unwrap(),
            fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
    let summary = fs::read_to_string(a.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().next(), Some("k,sup_v,min_v,j_wins_nodes"));
    assert_eq!(summary.lines().count(), 5);
}

#[test]
fn compute_value_with_zero_running_cost() {
    let dir = tempfile::tempdir().unwrap();
    let model = write_model(dir.path(), "zero_f.json", |d| {
        d["costs"]["running"]["modes"] = serde_json::json!(["0", "0"]);
    });
    let out = dir.path().join("o");
    let (code, text) = pdmp(&[
        "compute-value",
        "--model",
        s(&model),
        "--out",
        s(&out),
        "--grid",
        "20",
    ]);
    assert_eq!(code, 0, "{text}");
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    for line in summary.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        assert_eq!(&cols[1..], ["0", "0", "0"], "{line}");
    }
}

#[test]
fn sandwich_flag_prints_pass() {
    let dir = tempfile::tempdir().unwrap();
    let model = write_model(dir.path(), "rm1.json", |_| {});
    let out = dir.path().join("o");
    let (code, text) = pdmp(&[
        "compute-value",
        "--model",
        s(&model),
        "--out",
        s(&out),
        "--grid",
        "30",
        "--sandwich",
    ]);
    assert_eq!(code, 0, "{text}");
    assert!(text.contains("PASS sandwich"), "{text}");
    assert_eq!(
        fs::read_to_string(out.join("sandwich.csv"))
            .unwrap()
            .lines()
            .count(),
        4
    );
}

#[test]
fn simulate_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let model = write_model(dir.path(), "rm1.json", |_| {});
    let out = dir.path().join("run");
    let (code, text) = pdmp(&[
        "compute-value",
        "--model",
        s(&model),
        "--out",
        s(&out),
        "--x0",
        "1:2",
    ]);
    assert_eq!(code, 0, "{text}");

    let (code, text) = pdmp(&[
        "simulate",
        "--model",
        s(&model),
        "--out",
        s(&out),
        "--x0",
        "1:2",
        "--n0",
        "0,2",
        "--replicates",
        "20000",
        "--seed",
        "5",
        "--law",
        "--dump",
        "2",
    ]);
    assert_eq!(code, 0, "{text}");
    let report = fs::read_to_string(out.join("cost_report.csv")).unwrap();
    let mut lines = report.lines();
    assert_eq!(
        lines.next(),
        Some("x0,N0,eps,replicates,mean,se,ci_lo,ci_hi,V_N0,z")
    );
    for line in lines {
        let cols: Vec<f64> = line
            .split(',')
            .skip(1)
            .map(|c| c.parse().unwrap())
            .collect();
        let (lo, hi, v, z) = (cols[5], cols[6], cols[7], cols[8]);
        assert!(z < 3.0, "{line}");
        assert!(
            lo < hi && (lo - v).abs() < 0.1 && (hi - v).abs() < 0.1,
            "{line}"
        );
    }
    assert_eq!(
        fs::read_to_string(out.join("trajectories.jsonl"))
            .unwrap()
            .lines()
            .count(),
        4
    );

    // The rendered report: 200 cell-centre rows per mode per level, plus J profiles.
    let bundle = dir.path().join("fresh").join("report");
    let value = out.join("value.pdmpval");
    let (code, text) = pdmp(&[
        "report",
        "--model",
        s(&model),
        "--out",
        s(&bundle),
        "--value",
        s(&value),
        "--x0",
        "1:2",
        "--n0",
        "1",
        "--replicates",
        "2000",
    ]);
    assert_eq!(code, 0, "{text}");
    let curves = fs::read_to_string(bundle.join("vk_curves.csv")).unwrap();
    for k in 0..=3 {
        for mode in ["1", "2"] {
            let n = curves
                .lines()
                .skip(1)
                .filter(|l| l.starts_with(&format!("{k},{mode},")))
                .count();
            assert_eq!(n, 200, "k={k} mode={mode}");
        }
    }
    let profiles = fs::read_to_string(bundle.join("j_profiles.csv")).unwrap();
    for line in profiles.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        assert_eq!(cols[7], "true", "{line}");
        let csv = fs::read_to_string(bundle.join(cols[2])).unwrap();
        let min = csv
            .lines()
            .skip(1)
            .map(|l| l.split(',').nth(1).unwrap().parse::<f64>().unwrap())
            .fold(f64::INFINITY, f64::min);
        let at_r: f64 = cols[5].parse().unwrap();
        assert!(min + 0.01 > at_r, "{line}");
    }
    assert!(bundle.join("cost_histogram.csv").exists());

    // An edited model no longer matches the artifact.
    let edited = write_model(dir.path(), "edited.json", |d| {
        d["discount"] = Value::from(0.45)
    });
    let (code, _) = pdmp(&[
        "simulate",
        "--model",
        s(&edited),
        "--out",
        s(&out),
        "--x0",
        "1:2",
        "--replicates",
        "10",
    ]);
    assert_eq!(code, 4);
}

#[test]
fn bad_start_point_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let model = write_model(dir.path(), "rm1.json", |_| {});
    let out = dir.path().join("o");
    let (code, _) = pdmp(&[
        "compute-value",
        "--model",
        s(&model),
        "--out",
        s(&out),
        "--grid",
        "10",
        "--x0",
        "7:1",
    ]);
    assert_eq!(code, 2);
}

#[test]
fn error_kinds_map_to_exit_codes() {
    use pdmp_impulse::cli::exit_code;
    use pdmp_impulse::Error;
    assert_eq!(exit_code(&Error::Numerical("no convergence".into())), 3);
    assert_eq!(exit_code(&Error::Resource("budget".into())), 3);
    assert_eq!(
        exit_code(&Error::ModelMismatch {
            expected: "a".into(),
            found: "b".into()
        }),
        4
    );
    assert_eq!(
        exit_code(&Error::Io(std::io::ErrorKind::NotFound.into())),
        1
    );
}
