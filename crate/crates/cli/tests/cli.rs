use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn peerlink(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_peerlink"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SIM: &str = r#"{
  "schema_version": 1,
  "groups": 25,
  "group_size": 15,
  "lambda": 0.05,
  "beta": [1.0, 2.0],
  "pi1": 0.2,
  "pi0": 0.1,
  "measures": [
    {"mode": "unsymmetrized", "p0": 0.1, "p1": 0.2},
    {"mode": "unsymmetrized", "p0": 0.08, "p1": 0.16}
  ],
  "fixed_effects": {"scale": 5.0, "intercept": -1.5, "noise_sd": 1.0},
  "seed": 11
}"#;

fn mc_config() -> String {
    format!(
        r#"{{
  "schema_version": 1,
  "sim": {},
  "replications": 6,
  "variants": [
    {{"estimator": {{"variant": "naive", "regressor_measure": 1, "instruments": "same_measure", "fixed_effects": "within"}}}},
    {{"estimator": {{"variant": "adjusted", "regressor_measure": 1, "instruments": "cross_measure", "fixed_effects": "within"}}}},
    {{"estimator": {{"variant": "oracle", "fixed_effects": "within"}}}},
    {{"name": "s2sls", "estimator": {{"variant": "s2sls", "fixed_effects": "within"}}}}
  ]
}}"#,
        SIM.replacen("\"schema_version\": 1,", "", 1)
    )
}

#[test]
fn pipeline_runs_end_to_end() {
    let d = tempfile::tempdir().unwrap();
    let cfg = d.path().join("sim.json");
    fs::write(&cfg, SIM).unwrap();
    let data = d.path().join("data");
    let rates = d.path().join("rates.json");
    let fit = d.path().join("fit.json");
    let stacked = d.path().join("s2sls.json");

    assert!(peerlink(&["simulate", "--config", path(&cfg), "--out", path(&data)]).status.success());
    for f in ["nodes.csv", "edges.csv", "truth.csv", "dataset.json"] {
        assert!(data.join(f).exists(), "{f} missing");
    }
    let o = peerlink(&["rates", "--data", path(&data), "--mode", "two", "--out", path(&rates)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let o = peerlink(&[
        "fit", "--data", path(&data), "--rates", path(&rates), "--variant", "adjusted", "--fe", "within", "--measure",
        "2", "--out", path(&fit),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(&fit).unwrap();
    assert!(text.contains("\"schema_version\": 1"));
    assert!(text.contains("\"first_stage_corrected\": true"));
    assert!(text.contains("adjusted[W2y;H1X]"));
    let o = peerlink(&["s2sls", "--data", path(&data), "--rates", path(&rates), "--out", path(&stacked)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let o = peerlink(&["fit", "--data", path(&data), "--variant", "naive", "--form", "means"]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stdout).contains("\"lambda\""));
}

#[test]
fn mc_reports_identical_across_thread_counts() {
    let d = tempfile::tempdir().unwrap();
    let cfg = d.path().join("mc.json");
    fs::write(&cfg, mc_config()).unwrap();
    let a = d.path().join("a");
    let b = d.path().join("b");
    let o = peerlink(&["--threads", "1", "mc", "--config", path(&cfg), "--out", path(&a)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let o = peerlink(&["--threads", "8", "mc", "--config", path(&cfg), "--out", path(&b)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["report.json", "table.md", "table.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }
}

#[test]
fn simulate_is_identical_across_thread_counts() {
    let d = tempfile::tempdir().unwrap();
    let cfg = d.path().join("sim.json");
    fs::write(&cfg, SIM).unwrap();
    let a = d.path().join("a");
    let b = d.path().join("b");
    assert!(peerlink(&["--threads", "1", "simulate", "--config", path(&cfg), "--out", path(&a)]).status.success());
    assert!(peerlink(&["--threads", "8", "simulate", "--config", path(&cfg), "--out", path(&b)]).status.success());
    for f in ["nodes.csv", "edges.csv", "truth.csv", "dataset.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }
}

#[test]
fn seed_flag_overrides_config() {
    let d = tempfile::tempdir().unwrap();
    let cfg = d.path().join("sim.json");
    fs::write(&cfg, SIM).unwrap();
    let a = d.path().join("a");
    let b = d.path().join("b");
    assert!(peerlink(&["simulate", "--config", path(&cfg), "--out", path(&a)]).status.success());
    assert!(peerlink(&["--seed", "12", "simulate", "--config", path(&cfg), "--out", path(&b)]).status.success());
    assert_ne!(fs::read(a.join("nodes.csv")).unwrap(), fs::read(b.join("nodes.csv")).unwrap());
}

#[test]
fn validation_errors_exit_2() {
    let d = tempfile::tempdir().unwrap();
    let cfg = d.path().join("sim.json");
    fs::write(&cfg, SIM.replacen("\"schema_version\": 1,", "", 1)).unwrap();
    let o = peerlink(&["simulate", "--config", path(&cfg), "--out", path(&d.path().join("x"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("schema_version"));

    fs::write(&cfg, SIM).unwrap();
    let data = d.path().join("data");
    assert!(peerlink(&["simulate", "--config", path(&cfg), "--out", path(&data)]).status.success());
    let o = peerlink(&["fit", "--data", path(&data), "--variant", "adjusted"]);
    assert_eq!(o.status.code(), Some(2));
    let o = peerlink(&["fit", "--data", path(&data), "--bogus"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn numerical_failures_exit_3() {
    let d = tempfile::tempdir().unwrap();
    let cfg = d.path().join("sim.json");
    let empty = SIM.replace("\"pi1\": 0.2", "\"pi1\": 0.0").replace("\"pi0\": 0.1", "\"pi0\": 0.0");
    fs::write(&cfg, empty).unwrap();
    let data = d.path().join("data");
    assert!(peerlink(&["simulate", "--config", path(&cfg), "--out", path(&data)]).status.success());
    let o = peerlink(&["fit", "--data", path(&data), "--variant", "oracle"]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
    let o = peerlink(&["lim", "--p0", "0.5", "--p1", "0.5", "--n", "4"]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn lim_reproduces_three_node_table() {
    let o = peerlink(&["lim", "--p0", "0.1", "--p1", "0.2", "--n", "3", "--h", "1,0", "--j", "0", "--check"]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let w = v["weight"].as_f64().unwrap();
    assert!((w - 0.675 / 0.49).abs() < 1e-12);
    assert!(v["max_abs_diff_vs_bruteforce"].as_f64().unwrap() < 1e-12);
}
