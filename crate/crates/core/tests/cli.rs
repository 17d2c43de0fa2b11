use std::fs;
use std::path::Path;
use std::process::Command;

use serde_json::Value;

fn run(dir: &Path, sub: &str, config: &str, extra: &[&str]) -> i32 {
    let cfg = dir.join(format!("{sub}.json"));
    fs::write(&cfg, config).unwrap();
    let status = Command::new(env!("CARGO_BIN_EXE_mixture-mte"))
        .arg(sub)
        .arg("--config")
        .arg(&cfg)
        .args(extra)
        .env("RUST_LOG", "error")
        .status()
        .unwrap();
    status.code().unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn simulate_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let code = run(dir.path(), "simulate", r#"{"dgp": {"n": 500}}"#, &["--out", out.to_str().unwrap(), "--seed", "3"]);
        assert_eq!(code, 0);
    }
    for f in ["simulated.csv", "latent.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let csv = fs::read_to_string(a.join("simulated.csv")).unwrap();
    assert!(csv.starts_with("y,d,x1,zeta1,zeta2\n"));
    assert_eq!(csv.lines().count(), 501);
    let prov = json(&a.join("provenance.json"));
    assert_eq!(prov["config"]["dgp"]["n"], 500);
    assert_eq!(prov["schema_version"], 1);
}

#[test]
fn fit_then_aggregate() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let sim = d.join("sim");
    assert_eq!(run(d, "simulate", r#"{"dgp": {"n": 20000}}"#, &["--out", sim.to_str().unwrap(), "--seed", "7"]), 0);
    let data = sim.join("simulated.csv");
    let cfg = format!(r#"{{"data": {{"path": {:?}}}, "em": {{"n_starts": 3}}, "x_points": [[1, 0.5], [1, -1]]}}"#, data);
    let fit = d.join("fit");
    assert_eq!(run(d, "fit", &cfg, &["--out", fit.to_str().unwrap(), "--threads", "2"]), 0);
    let summary = json(&fit.join("summary.json"));
    let pi: Vec<f64> = summary["pi"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    assert!((pi[0] - 0.35).abs() < 0.05 && (pi[1] - 0.65).abs() < 0.05, "{pi:?}");
    for k in 0..2 {
        let curve = fs::read_to_string(fit.join(format!("mte_curve_x{}.csv", k + 1))).unwrap();
        assert!(curve.starts_with("group,p,mte,se,lo,hi\n"));
        assert_eq!(curve.lines().count(), 1 + 2 * 99);
    }
    assert!(fit.join("mixture_fit.json").exists() && fit.join("outcome_fit.json").exists());

    let fit2 = d.join("fit2");
    assert_eq!(run(d, "fit", &cfg, &["--out", fit2.to_str().unwrap(), "--threads", "1"]), 0);
    for f in ["mixture_fit.json", "outcome_fit.json", "mte_curve_x1.csv"] {
        assert_eq!(fs::read(fit.join(f)).unwrap(), fs::read(fit2.join(f)).unwrap(), "{f}");
    }

    let agg = format!(r#"{{"data": {{"path": {:?}}}, "aggregate": {{"fit_dir": {:?}}}, "x_points": [[1, 0.5], [1, -1]]}}"#, data, fit);
    let out = d.join("agg");
    assert_eq!(run(d, "aggregate", &agg, &["--out", out.to_str().unwrap()]), 0);
    let report = json(&out.join("aggregate_report.json"));
    assert!(report["prte"]["prte_model"].as_f64().unwrap().abs() < 1e-9);
    assert!(report["ate"]["overall"].as_f64().unwrap().is_finite());
    assert_eq!(report["cate"].as_array().unwrap().len(), 4);
}

#[test]
fn late_from_binary_instruments() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let sim = d.join("sim");
    let code = run(d, "simulate", r#"{"dgp": {"n": 3000, "instruments": {"kind": "binary"}}}"#, &["--out", sim.to_str().unwrap()]);
    assert_eq!(code, 0);
    let data = sim.join("simulated.csv");
    let cfg = format!(
        r#"{{"aggregate": {{"policy": {{"kind": "none"}}, "late": {{"path": {:?}, "outcome": "y", "treatment": "d", "instruments": ["z1", "z2"]}}}},
            "data": {{"path": {:?}, "groups": {{"groups": [{{"columns": ["x1", "z1"]}}, {{"columns": ["x1", "z2"]}}]}}}}, "em": {{"n_starts": 2}}}}"#,
        data, data
    );
    let out = d.join("out");
    assert_eq!(run(d, "fit", &cfg, &["--out", out.to_str().unwrap()]), 0);
    assert_eq!(run(d, "aggregate", &cfg, &["--out", out.to_str().unwrap()]), 0);
    let report = json(&out.join("aggregate_report.json"));
    let late = report["late"].as_array().unwrap();
    assert_eq!(late.len(), 3);
    assert!(late.iter().all(|l| l["estimate"].as_f64().unwrap().is_finite()));
}

#[test]
fn monte_carlo_tables() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = r#"{"mc": {"sample_sizes": [400], "settings": {"replications": 2, "em": {"n_starts": 1}}}}"#;
    assert_eq!(run(d, "mc", cfg, &["--out", d.join("mc").to_str().unwrap()]), 0);
    let t3 = fs::read_to_string(d.join("mc/table3.csv")).unwrap();
    assert!(t3.starts_with("statistic,estimator,n,inner_knots,ridge,MTE1.1"));
    let t4 = fs::read_to_string(d.join("mc/table4.csv")).unwrap();
    assert!(t4.contains("gamma11") && t4.contains("pi2"));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = d.join("o");
    let o = out.to_str().unwrap();
    assert_eq!(run(d, "fit", r#"{"data": {"path": "/nonexistent/data.csv"}}"#, &["--out", o]), 3);
    assert_eq!(run(d, "fit", r#"{"bogus": 1}"#, &["--out", o]), 2);
    assert_eq!(run(d, "simulate", r#"{"dgp": {"n": 0}}"#, &["--out", o]), 2);
    assert_eq!(run(d, "fit", r#"{"ci_level": 1.5}"#, &["--out", o]), 2);
    let bad = d.join("bad.csv");
    fs::write(&bad, "y,d,x1,zeta1,zeta2\n1,1,0.5,,0.1\n").unwrap();
    let cfg = format!(r#"{{"data": {{"path": {:?}}}}}"#, bad);
    assert_eq!(run(d, "fit", &cfg, &["--out", o]), 3);
    let missing = Command::new(env!("CARGO_BIN_EXE_mixture-mte"))
        .args(["simulate", "--config", "/nonexistent.json"])
        .status()
        .unwrap();
    assert_eq!(missing.code(), Some(2));
}
