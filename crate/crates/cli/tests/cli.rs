use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn gaq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gaq"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

const LINEAR_MODEL: &str = r#"{
  "link": {"family": "identity"},
  "components": [
    {"family": "linear", "slope": 3.0, "intercept": 2.0},
    {"family": "linear", "slope": -1.0}
  ],
  "error": {"family": "none"},
  "level": {"tau": 0.5},
  "covariates": {"phi": [0.0, 0.0]}
}"#;

const FIT_CONFIG: &str = r#"{
  "p": 2,
  "h": 0.25,
  "level": {"tau": 0.5},
  "box": {"lower": [0.1, 0.1], "upper": [0.9, 0.9]}
}"#;

fn simulate_linear(dir: &Path, n: &str) -> std::path::PathBuf {
    let model = dir.join("model.json");
    fs::write(&model, LINEAR_MODEL).unwrap();
    let data = dir.join("data.csv");
    let out = gaq(&[
        "simulate",
        "--config",
        path_str(&model),
        "--n",
        n,
        "--seed",
        "7",
        "--out",
        path_str(&data),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    data
}

#[test]
fn simulate_is_reproducible_and_writes_truth() {
    let dir = tempfile::tempdir().unwrap();
    let data = simulate_linear(dir.path(), "300");
    let first = fs::read(&data).unwrap();
    simulate_linear(dir.path(), "300");
    assert_eq!(first, fs::read(&data).unwrap());

    let truth: Value = serde_json::from_slice(&fs::read(dir.path().join("data.truth.json")).unwrap()).unwrap();
    for c in truth["components"].as_array().unwrap() {
        assert!(c["anchor_value"].as_f64().unwrap().abs() < 1e-12);
    }
    assert_eq!(truth["level"]["tau"].as_f64(), Some(0.5));
    assert_eq!(truth["level"]["alpha"].as_f64(), Some(0.5));
}

#[test]
fn simulate_rejects_zero_size_and_bad_schema() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("model.json");
    fs::write(&model, LINEAR_MODEL).unwrap();
    let out_csv = dir.path().join("d.csv");
    let out = gaq(&["simulate", "--config", path_str(&model), "--n", "0", "--out", path_str(&out_csv)]);
    assert_eq!(code(&out), 2);

    fs::write(&model, r#"{"link": {"family": "cosh"}}"#).unwrap();
    let out = gaq(&["simulate", "--config", path_str(&model), "--n", "10", "--out", path_str(&out_csv)]);
    assert_eq!(code(&out), 2);
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());
}

fn read_components(path: &Path) -> Vec<(usize, f64, f64)> {
    let mut rdr = csv::Reader::from_path(path).unwrap();
    rdr.records()
        .map(|r| {
            let r = r.unwrap();
            (r[0].parse().unwrap(), r[1].parse().unwrap(), r[2].parse().unwrap())
        })
        .collect()
}

#[test]
fn fit_recovers_noiseless_linear_components_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let data = simulate_linear(dir.path(), "500");
    let cfg = dir.path().join("fit.json");
    fs::write(&cfg, FIT_CONFIG).unwrap();
    let out_dir = dir.path().join("fit");
    let args = ["fit", "--data", path_str(&data), "--config", path_str(&cfg), "--out", path_str(&out_dir)];
    let out = gaq(&args);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));

    // The identified truth is q_u(x) = slope_u (x - 0.5) / slope_1 with slopes 3, -1.
    let rows = read_components(&out_dir.join("components.csv"));
    assert!(!rows.is_empty());
    for (u, x, v) in &rows {
        let truth = if *u == 1 { x - 0.5 } else { -(x - 0.5) / 3.0 };
        assert!((v - truth).abs() < 1e-2, "u={u} x={x} est={v} truth={truth}");
    }
    let diag: Value = serde_json::from_slice(&fs::read(out_dir.join("diagnostics.json")).unwrap()).unwrap();
    assert!((diag["components"]["c_hat"].as_f64().unwrap() + 1.0 / 3.0).abs() < 2e-2);

    let first = fs::read(out_dir.join("components.csv")).unwrap();
    let link_first = fs::read(out_dir.join("link.csv")).unwrap();
    assert_eq!(code(&gaq(&args)), 0);
    assert_eq!(first, fs::read(out_dir.join("components.csv")).unwrap());
    assert_eq!(link_first, fs::read(out_dir.join("link.csv")).unwrap());
}

#[test]
fn fit_on_identical_rows_is_an_estimation_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("flat.csv");
    let mut text = String::from("x1,x2,y\n");
    for i in 0..200 {
        text.push_str(&format!("0.5,0.5,{}\n", i % 3));
    }
    fs::write(&data, text).unwrap();
    let cfg = dir.path().join("fit.json");
    fs::write(&cfg, FIT_CONFIG).unwrap();
    let out = gaq(&[
        "fit",
        "--data",
        path_str(&data),
        "--config",
        path_str(&cfg),
        "--out",
        path_str(&dir.path().join("o")),
    ]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn predict_writes_one_row_per_point() {
    let dir = tempfile::tempdir().unwrap();
    let data = simulate_linear(dir.path(), "500");
    let cfg = dir.path().join("fit.json");
    fs::write(&cfg, FIT_CONFIG).unwrap();
    let points = dir.path().join("points.csv");
    fs::write(&points, "x1,x2\n0.5,0.5\n0.3,0.7\n").unwrap();
    let pred = dir.path().join("pred.csv");
    let out = gaq(&[
        "predict",
        "--data",
        path_str(&data),
        "--config",
        path_str(&cfg),
        "--points",
        path_str(&points),
        "--out",
        path_str(&pred),
        "--tau",
        "0.5",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let mut rdr = csv::Reader::from_path(&pred).unwrap();
    let rows: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 2);
    // q(x) = 2 + 3 x1 - x2 at the two points.
    for (row, truth) in rows.iter().zip([3.0, 2.2]) {
        let q: f64 = row[3].parse().unwrap();
        assert!((q - truth).abs() < 0.1, "{q} vs {truth}");
    }
}

fn write_power_law(path: &Path) {
    let mut text = String::from("n,rep,probe,metric,value\n");
    for n in [100usize, 200, 400, 800] {
        text.push_str(&format!("{n},0,config,p,2.0\n"));
        for rep in 0..4 {
            let s = if rep % 2 == 0 { 1.0 } else { -1.0 };
            text.push_str(&format!("{n},{rep},q2@0.5,error,{:?}\n", s * (n as f64).powf(-0.4)));
        }
    }
    fs::write(path, text).unwrap();
}

#[test]
fn report_matches_exact_power_law() {
    let dir = tempfile::tempdir().unwrap();
    let mc = dir.path().join("mc.csv");
    write_power_law(&mc);
    let out_dir = dir.path().join("report");
    let out = gaq(&["report", "--data", path_str(&mc), "--out", path_str(&out_dir), "--check"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let mut rdr = csv::Reader::from_path(out_dir.join("rates.csv")).unwrap();
    let row = rdr.records().next().unwrap().unwrap();
    assert_eq!(&row[0], "q2@0.5");
    let slope: f64 = row[2].parse().unwrap();
    assert!((slope + 0.4).abs() < 1e-12);
    assert!(String::from_utf8_lossy(&out.stdout).contains("rate table"));
    assert!(out_dir.join("cells.csv").exists());
}

#[test]
fn report_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.csv");
    fs::write(&empty, "n,rep,probe,metric,value\n").unwrap();
    assert_eq!(code(&gaq(&["report", "--data", path_str(&empty)])), 2);
    fs::write(&empty, "").unwrap();
    assert_eq!(code(&gaq(&["report", "--data", path_str(&empty)])), 2);

    // Errors that do not shrink with n fail the rate check.
    let flat = dir.path().join("flat.csv");
    let mut text = String::from("n,rep,probe,metric,value\n");
    for n in [100, 200, 400] {
        text.push_str(&format!("{n},0,q2@0.5,error,0.1\n{n},1,q2@0.5,error,-0.1\n"));
    }
    fs::write(&flat, text).unwrap();
    assert_eq!(code(&gaq(&["report", "--data", path_str(&flat)])), 0);
    assert_eq!(code(&gaq(&["report", "--data", path_str(&flat), "--check"])), 4);
}

#[test]
fn mc_runs_a_small_noiseless_experiment() {
    let dir = tempfile::tempdir().unwrap();
    let exp = dir.path().join("exp.json");
    let text = format!(
        r#"{{
  "model": {LINEAR_MODEL},
  "n_list": [300],
  "replications": 2,
  "h_constant": 0.9,
  "probes": [{{"kind": "component", "axis": 1, "x": 0.7}}, {{"kind": "uniform", "axis": 1}}],
  "seed_base": 3
}}"#
    );
    fs::write(&exp, text).unwrap();
    let out_dir = dir.path().join("mc");
    let out = gaq(&["--threads", "2", "mc", "--config", path_str(&exp), "--out", path_str(&out_dir)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let csv_text = fs::read_to_string(out_dir.join("mc.csv")).unwrap();
    assert!(csv_text.starts_with("n,rep,probe,metric,value"));
    assert!(csv_text.contains("q2@0.7,error"));
    assert!(out_dir.join("summary.json").exists());

    fs::write(&exp, r#"{"model": 1}"#).unwrap();
    assert_eq!(code(&gaq(&["mc", "--config", path_str(&exp), "--out", path_str(&out_dir)])), 2);
}

#[test]
fn asymptotics_reports_constants() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("model.json");
    fs::write(
        &model,
        r#"{
  "link": {"family": "identity"},
  "components": [
    {"family": "linear", "slope": 1.0},
    {"family": "sine_bump", "amplitude": 0.1, "frequency": 1.0}
  ],
  "error": {"family": "gaussian", "sigma": 0.2},
  "level": {"alpha": 0.5},
  "covariates": {"phi": [0.3, 0.3]}
}"#,
    )
    .unwrap();
    let out = gaq(&["asymptotics", "--config", path_str(&model), "--component", "2", "--x", "0.7", "--n", "1000"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(v["report"]["variance"].as_f64().unwrap() > 0.0);
    assert_eq!(v["report"]["u"].as_u64(), Some(1));
    let bad = gaq(&["asymptotics", "--config", path_str(&model), "--component", "3", "--x", "0.7"]);
    assert_eq!(code(&bad), 2);
}
