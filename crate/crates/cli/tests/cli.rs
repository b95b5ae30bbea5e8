use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_coverbias"));
    c.env("COVERBIAS_THREADS", "2");
    c
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("binary runs")
}

fn ok(cmd: &mut Command) -> Output {
    let out = run(cmd);
    assert!(
        out.status.success(),
        "exit {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn scenario() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios/logistic_driver.toml")
}

/// Synthetic world plus its run config in `dir`.
fn world(dir: &Path) -> PathBuf {
    ok(bin().args(["synth", "--spec"]).arg(scenario()).arg("--out").arg(dir));
    let cfg = dir.join("config.toml");
    assert!(cfg.is_file());
    cfg
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn coverage_of_simple_fixture() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fs::write(d.join("counts.csv"), "area_id,count\nA,25\nB,150\n").unwrap();
    fs::write(d.join("census.csv"), "area_id,count\nA,100\nB,100\n").unwrap();
    let out = ok(bin()
        .args(["coverage", "--source-id", "app", "--counts"])
        .arg(d.join("counts.csv"))
        .arg("--census")
        .arg(d.join("census.csv"))
        .arg("--out")
        .arg(d.join("bias.csv")));
    let text = fs::read_to_string(d.join("bias.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("area_id,coverage,bias"));
    assert_eq!(lines.next(), Some("A,25,75"));
    assert_eq!(lines.next(), Some("B,150,-50"));
    let summary: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["national_coverage"], 87.5);
    assert_eq!(summary["source_id"], "app");
}

#[test]
fn spatial_with_two_schemes() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    world(d);
    ok(bin()
        .args(["coverage", "--counts"])
        .arg(d.join("counts.csv"))
        .arg("--census")
        .arg(d.join("census.csv"))
        .arg("--out")
        .arg(d.join("bias.csv")));
    ok(bin()
        .args(["spatial", "--schemes", "queen,knn:8", "--permutations", "99", "--bias"])
        .arg(d.join("bias.csv"))
        .arg("--areas")
        .arg(d.join("areas.geojson"))
        .arg("--out")
        .arg(d.join("spatial.json")));
    let v = read_json(&d.join("spatial.json"));
    let moran = v["moran"].as_array().unwrap();
    assert_eq!(moran.len(), 2);
    assert_eq!(moran[0]["scheme"], "queen");
    assert_eq!(moran[1]["scheme"], "knn:8");
    assert_eq!(moran[0]["n_perm"], 99);
    let (a, b) = (moran[0]["I"].as_f64().unwrap(), moran[1]["I"].as_f64().unwrap());
    assert_eq!(v["range"].as_f64().unwrap(), (a - b).abs());
}

#[test]
fn missing_census_fails_before_compute() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let cfg = world(d);
    fs::remove_file(d.join("census.csv")).unwrap();
    let out = run(bin().arg("run").arg("--config").arg(&cfg));
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("census"));
    assert!(!d.join("report").exists());
}

#[test]
fn failed_stage_leaves_marker() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let cfg = world(d);
    let census = fs::read_to_string(d.join("census.csv")).unwrap();
    let mut lines: Vec<String> = census.lines().map(String::from).collect();
    let id = lines[1].split(',').next().unwrap().to_string();
    lines[1] = format!("{id},0");
    fs::write(d.join("census.csv"), lines.join("\n") + "\n").unwrap();
    let out = run(bin().arg("run").arg("--config").arg(&cfg));
    assert_eq!(out.status.code(), Some(4));
    let report = d.join("report");
    assert!(report.join("FAILED").is_file());
    assert!(!report.join("report.json").exists());
}

#[test]
fn negative_count_is_domain_error() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fs::write(d.join("counts.csv"), "area_id,count\nA,-3\n").unwrap();
    fs::write(d.join("census.csv"), "area_id,count\nA,100\n").unwrap();
    let out = run(bin()
        .args(["coverage", "--counts"])
        .arg(d.join("counts.csv"))
        .arg("--census")
        .arg(d.join("census.csv"))
        .arg("--out")
        .arg(d.join("bias.csv")));
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn constant_bias_is_degenerate() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    world(d);
    let geo = read_json(&d.join("areas.geojson"));
    let mut text = String::from("area_id,coverage,bias\n");
    for f in geo["features"].as_array().unwrap() {
        text += &format!("{},40,60\n", f["properties"]["area_id"].as_str().unwrap());
    }
    fs::write(d.join("bias.csv"), text).unwrap();
    let out = run(bin()
        .args(["spatial", "--bias"])
        .arg(d.join("bias.csv"))
        .arg("--areas")
        .arg(d.join("areas.geojson"))
        .arg("--out")
        .arg(d.join("spatial.json")));
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn run_matches_subcommands() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let cfg = world(d);
    let flags = ["--seed", "17", "--permutations", "199"];
    let report = String::from_utf8(ok(bin().arg("run").arg("--config").arg(&cfg).args(flags)).stdout).unwrap();
    let report = read_json(Path::new(report.trim()));
    let src = d.join("report").join("synthetic");

    ok(bin()
        .args(["coverage", "--source-id", "synthetic", "--counts"])
        .arg(d.join("counts.csv"))
        .arg("--census")
        .arg(d.join("census.csv"))
        .arg("--out")
        .arg(d.join("bias.csv")));
    assert_eq!(
        fs::read_to_string(d.join("bias.csv")).unwrap(),
        fs::read_to_string(src.join("coverage.csv")).unwrap()
    );

    ok(bin()
        .args(["spatial", "--config"])
        .arg(&cfg)
        .args(flags)
        .arg("--bias")
        .arg(d.join("bias.csv"))
        .arg("--areas")
        .arg(d.join("areas.geojson"))
        .arg("--census")
        .arg(d.join("census.csv"))
        .arg("--out")
        .arg(d.join("spatial.json")));
    assert_eq!(read_json(&d.join("spatial.json")), report["sources"][0]["spatial"]);

    let model_dir = d.join("model");
    ok(bin()
        .args(["model", "--config"])
        .arg(&cfg)
        .args(flags)
        .arg("--bias")
        .arg(d.join("bias.csv"))
        .arg("--covariates")
        .arg(d.join("covariates.csv"))
        .arg("--feature-schema")
        .arg(d.join("feature_schema.csv"))
        .arg("--out")
        .arg(&model_dir));
    assert_eq!(
        fs::read_to_string(model_dir.join("model.json")).unwrap(),
        fs::read_to_string(src.join("model.json")).unwrap()
    );
    assert_eq!(read_json(&model_dir.join("fit.json")), report["sources"][0]["model"]);

    let explain_dir = d.join("explain");
    ok(bin()
        .args(["explain", "--config"])
        .arg(&cfg)
        .arg("--model")
        .arg(model_dir.join("model.json"))
        .arg("--bias")
        .arg(d.join("bias.csv"))
        .arg("--covariates")
        .arg(d.join("covariates.csv"))
        .arg("--feature-schema")
        .arg(d.join("feature_schema.csv"))
        .arg("--out")
        .arg(&explain_dir));
    assert_eq!(
        fs::read_to_string(explain_dir.join("shap.csv")).unwrap(),
        fs::read_to_string(src.join("shap.csv")).unwrap()
    );
    let explain = read_json(&explain_dir.join("explain.json"));
    assert_eq!(explain["expected_value"], report["sources"][0]["expected_value"]);
    let top = |v: &Value| v.as_array().unwrap()[0]["feature"].clone();
    assert_eq!(top(&explain["importance"]["features"]), top(&report["importance"]));
    assert_eq!(top(&report["importance"]), "income");
}

#[test]
fn ingest_check_reports_alignment() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let cfg = world(d);
    let out = ok(bin().arg("ingest-check").arg("--config").arg(&cfg));
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["aligned"].as_array().unwrap().len(), 100);
    assert!(v["missing"].as_array().unwrap().is_empty());
}
