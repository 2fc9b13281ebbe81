use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_parabolic"))
}

fn spec(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../specs").join(name)
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

/// The JSON document at the start of stdout (the constants command appends a table).
fn leading_json(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stdout);
    let mut stream = serde_json::Deserializer::from_str(&text).into_iter::<Value>();
    stream.next().expect("json on stdout").expect("valid json")
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn scalar_model_constants() {
    let out = run(&["constants", "--model", path_str(&spec("cubic_1d.toml"))]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let doc = leading_json(&out);
    let c = &doc["constants"];
    assert!((c["a_f"]["value"].as_f64().unwrap() - 1.0).abs() < 1e-6);
    assert!((c["big_a_f"]["value"].as_f64().unwrap() - 3.0).abs() < 1e-6);
    assert_eq!(doc["existence_holds"], Value::Bool(true));
    assert!(String::from_utf8_lossy(&out.stdout).contains("A_f"));
}

#[test]
fn malformed_input_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "system = \"map\"\nn = [").unwrap();
    assert_eq!(code(&run(&["constants", "--model", path_str(&bad)])), 2);
    let missing = dir.path().join("missing.toml");
    assert_eq!(code(&run(&["approximate", "--model", path_str(&missing)])), 2);
    assert_eq!(code(&run(&["constants", "--model", path_str(&spec("cubic_1d.toml")), "--rho", "-1"])), 2);
}

#[test]
fn strict_mode_fails_on_broken_hypotheses() {
    let model = spec("repelling_1d.json");
    assert_eq!(code(&run(&["constants", "--model", path_str(&model)])), 0);
    assert_eq!(code(&run(&["constants", "--model", path_str(&model), "--strict"])), 1);
}

#[test]
fn residual_slopes_follow_the_order() {
    let model = spec("synthetic_map.toml");
    for (j, margin) in [(0usize, 0.0), (3, 0.2)] {
        let out = run(&["approximate", "--model", path_str(&model), "--order", &j.to_string()]);
        assert_eq!(code(&out), 0);
        let doc = leading_json(&out);
        let slope = doc["min_slope"].as_f64().unwrap();
        assert!(slope >= (3 + j) as f64 - margin - 1e-9, "j = {j}: slope {slope}");
    }
}

#[test]
fn approximate_outputs_are_reproducible() {
    let model = spec("synthetic_map.toml");
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        let out = run(&["approximate", "--model", path_str(&model), "--order", "2", "--out", path_str(d.path())]);
        assert_eq!(code(&out), 0);
    }
    for name in ["parametrization.json", "residual.csv"] {
        let a = fs::read(dirs[0].path().join(name)).unwrap();
        let b = fs::read(dirs[1].path().join(name)).unwrap();
        assert!(!a.is_empty());
        assert_eq!(a, b, "{name} differs between runs");
    }
    let csv = fs::read_to_string(dirs[0].path().join("residual.csv")).unwrap();
    assert!(csv.starts_with("radius,E_x,E_y,E_theta,total,slope\n"));
}

#[test]
fn thread_count_does_not_change_results() {
    let model = spec("synthetic_map.toml");
    let outs: Vec<Vec<u8>> = ["1", "3"]
        .iter()
        .map(|t| {
            let out = bin()
                .env("PARABOLIC_THREADS", t)
                .args(["approximate", "--model", path_str(&model), "--order", "2"])
                .output()
                .unwrap();
            assert_eq!(code(&out), 0);
            out.stdout
        })
        .collect();
    assert_eq!(outs[0], outs[1]);
    let bad = bin()
        .env("PARABOLIC_THREADS", "zero")
        .args(["constants", "--model", path_str(&model)])
        .output()
        .unwrap();
    assert_eq!(code(&bad), 2);
}

#[test]
fn refine_and_validate_a_map() {
    let model = spec("synthetic_map.toml");
    let out = run(&["refine", "--model", path_str(&model)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let doc = leading_json(&out);
    assert!(doc["residual_after"].as_f64().unwrap() < doc["residual_before"].as_f64().unwrap());
    let out = run(&["validate", "--model", path_str(&model), "--order", "3", "--steps", "100"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(leading_json(&out)["iterate_bounds"]["violations"], 0);
}

#[test]
fn nbody_branches_have_opposite_gamma2() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "nbody",
        "--system",
        path_str(&spec("three_body_collinear.toml")),
        "--out",
        path_str(dir.path()),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let doc = leading_json(&out);
    assert!(doc["gamma2"].as_f64().unwrap() < 0.0);
    let esc = &doc["escape"];
    assert!((esc["angle"].as_f64().unwrap() - std::f64::consts::PI).abs() < 1e-2);
    for name in ["constants.json", "trajectory.csv", "escape.json", "residual.csv"] {
        assert!(dir.path().join(name).exists(), "{name} missing");
    }

    let out = run(&["nbody", "--system", path_str(&spec("three_body_equilateral.toml"))]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(leading_json(&out)["gamma2"].as_f64().unwrap() > 0.0);

    let out = run(&[
        "nbody",
        "--system",
        path_str(&spec("three_body_equilateral.toml")),
        "--branch",
        "collinear",
    ]);
    assert_eq!(code(&out), 0);
    assert!(leading_json(&out)["gamma2"].as_f64().unwrap() < 0.0);
}

#[test]
fn nbody_rejects_bad_masses() {
    let dir = tempfile::tempdir().unwrap();
    let sys = dir.path().join("zero.toml");
    fs::write(&sys, "masses = [1.0, 0.0, 0.001]\nconfiguration = \"collinear\"\n").unwrap();
    assert_eq!(code(&run(&["nbody", "--system", path_str(&sys)])), 2);
    let sys = dir.path().join("none.json");
    fs::write(&sys, r#"{"masses": [1.0, 0.001, 0.001]}"#).unwrap();
    assert_eq!(code(&run(&["nbody", "--system", path_str(&sys)])), 2);
}

#[test]
fn larger_systems_report_constants_only() {
    let dir = tempfile::tempdir().unwrap();
    let sys = dir.path().join("four.toml");
    fs::write(&sys, "masses = [1.0, 0.001, 0.001, 0.001]\nconfiguration = \"collinear\"\n").unwrap();
    let out = run(&["nbody", "--system", path_str(&sys), "--out", path_str(dir.path())]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(leading_json(&out)["central"]["nu"].as_f64().unwrap() > 0.0);
    assert!(dir.path().join("constants.json").exists());
    assert!(!dir.path().join("trajectory.csv").exists());
}
