use std::fs;
use std::path::Path;
use std::process::Command;

use serde_json::{json, Value};

const BIN: &str = env!("CARGO_BIN_EXE_quadcal");

fn run(experiment: &str, config: &Value, out: &Path) -> std::process::Output {
    let cfg = out.with_extension("json");
    fs::write(&cfg, config.to_string()).unwrap();
    Command::new(BIN)
        .arg(experiment)
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(out)
        .output()
        .unwrap()
}

fn run_ok(experiment: &str, config: &Value, out: &Path) {
    let o = run(experiment, config, out);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

fn small_beta() -> Value {
    json!({"repeats": 2, "sample_counts": [200, 2000], "max_iterations": 6})
}

#[test]
fn analytic_beta_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("beta");
    run_ok("analytic_beta", &small_beta(), &out);
    for f in ["config.json", "convergence.csv", "log.jsonl", "summary.json"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let csv = fs::read_to_string(out.join("convergence.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "experiment,repeat,iteration,N,D,err_adaptive,err_prior_rule,err_tensor_cc,err_smolyak,e_N"
    );
    // 2 sample counts × (2 repeats + mean) × 6 iterations.
    assert_eq!(lines.count(), 2 * 3 * 6);
    assert!(!csv.contains("NaN"));

    let log = fs::read_to_string(out.join("log.jsonl")).unwrap();
    let first: Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    for key in ["iteration", "D", "node_count", "new_nodes", "estimate", "e_N", "wall_time_s", "seed"] {
        assert!(first.get(key).is_some(), "log record lacks {key}");
    }

    let summary: Value = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert!((summary["oracle_mean"].as_f64().unwrap() - 41.0 / 102.0).abs() < 1e-12);
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = json!({"repeats": 2, "max_iterations": 5, "sample_count": 3000,
                     "genz": {"families": ["centered_c0", "centered_discontinuous"], "oracle_samples": 20000}});
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    run_ok("genz2d", &cfg, &a);
    run_ok("genz2d", &cfg, &b);
    for f in ["convergence.csv", "rule.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }
}

#[test]
fn rule_file_has_the_documented_fields() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("g");
    let cfg = json!({"repeats": 1, "max_iterations": 4, "sample_count": 2000, "baselines": [],
                     "genz": {"families": ["centered_product_peak"]}});
    run_ok("genz2d", &cfg, &out);
    let rule: Value = serde_json::from_str(&fs::read_to_string(out.join("rule.json")).unwrap()).unwrap();
    assert_eq!(rule["dimension"], 2);
    let nodes = rule["nodes"].as_array().unwrap();
    let weights = rule["weights"].as_array().unwrap();
    assert_eq!(nodes.len(), weights.len());
    assert_eq!(rule["evaluated_count"].as_u64().unwrap() as usize, nodes.len());
    assert_eq!(rule["exactness_count"], 5);
    let total: f64 = weights.iter().map(|w| w.as_f64().unwrap()).sum();
    assert!((total - 1.0).abs() < 1e-12);
    assert!(weights.iter().all(|w| w.as_f64().unwrap() >= 0.0));
}

#[test]
fn subprocess_toy_matches_builtin_toy() {
    let dir = tempfile::tempdir().unwrap();
    let base = json!({"max_iterations": 3, "sample_count": 3000,
                      "schedule": {"kind": "linear", "base": 0, "step": 5, "cap": 120}});
    let mut sub = base.clone();
    sub["model"] = json!({"subprocess": {"command": [BIN, "serve-model", "toy"], "timeout_s": 60}});
    sub["calibrate"] = json!({"truth": quadcal_cli::experiments::TOY_NOMINAL});
    let (a, b) = (dir.path().join("builtin"), dir.path().join("sub"));
    run_ok("calibrate", &base, &a);
    run_ok("calibrate", &sub, &b);
    for f in ["convergence.csv", "predictive.csv", "rule.json"] {
        assert_eq!(
            fs::read_to_string(a.join(f)).unwrap(),
            fs::read_to_string(b.join(f)).unwrap(),
            "{f} differs"
        );
    }
}

#[test]
fn print_config_shows_resolved_defaults() {
    let o = Command::new(BIN).args(["genz5d", "--seed", "9", "--print-config"]).output().unwrap();
    assert!(o.status.success());
    let cfg: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(cfg["experiment"], "genz5d");
    assert_eq!(cfg["seed"], 9);
    assert_eq!(cfg["schedule"]["kind"], "exponential");
    assert_eq!(cfg["genz"]["dimension"], 5);
}

#[test]
fn invalid_configs_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let o = run("genz2d", &json!({"sample_count": 0}), &dir.path().join("x"));
    assert!(!o.status.success());
    let o = run("genz2d", &json!({"experiment": "calibrate"}), &dir.path().join("y"));
    assert!(!o.status.success());
    let missing = json!({"model": {"subprocess": {"command": ["/nonexistent/model"]}},
                         "calibrate": {"truth": [1, 1, 1, 1, 1, 1, 1]}});
    let o = run("calibrate", &missing, &dir.path().join("z"));
    assert!(!o.status.success());
}
