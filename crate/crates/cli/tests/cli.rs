use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn hamgraph(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hamgraph"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn upwind_geodesic_succeeds() {
    let dir = TempDir::new().unwrap();
    let o = hamgraph(&["geodesic", "--scenario", "upwind-geodesic", "--particles", "200"], dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in ["run.json", "trajectory.csv", "rates.json", "paths.jsonl", "report.json"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let rates = json(&dir.path().join("rates.json"));
    assert_eq!(rates["valid"], true);
    let csv = fs::read_to_string(dir.path().join("trajectory.csv")).unwrap();
    assert!(csv.starts_with("time,rho_0,rho_1,S_0,S_1,H,mass_defect\n"));
    assert_eq!(fs::read_to_string(dir.path().join("paths.jsonl")).unwrap().lines().count(), 200);
}

#[test]
fn average_counterexample_reports_negative_rate() {
    let dir = TempDir::new().unwrap();
    let o = hamgraph(&["geodesic", "--scenario", "average-counterexample"], dir.path());
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    let rates = json(&dir.path().join("rates.json"));
    assert_eq!(rates["valid"], false);
    let v = rates["violations"].as_array().unwrap();
    assert!(v
        .iter()
        .any(|x| x["kind"] == "negative_off_diagonal" && x["i"] == 0 && x["j"] == 1 && x["value"].as_f64().unwrap() < 0.0));
    assert!(!dir.path().join("paths.jsonl").exists());
}

#[test]
fn config_errors_exit_one() {
    let dir = TempDir::new().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, "{\"graph\": ").unwrap();
    let o = hamgraph(&["geodesic", "--config", bad.to_str().unwrap()], &dir.path().join("o1"));
    assert_eq!(code(&o), 1);

    fs::write(&bad, r#"{"graph": {"nodes": 2, "edges": [[0, 1, 1.0]]}, "horizn": [0, 1]}"#).unwrap();
    let o = hamgraph(&["geodesic", "--config", bad.to_str().unwrap()], &dir.path().join("o2"));
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("horizn"), "{}", stderr(&o));

    fs::write(&bad, r#"{"graph": {"nodes": "two", "edges": []}}"#).unwrap();
    let o = hamgraph(&["geodesic", "--config", bad.to_str().unwrap()], &dir.path().join("o3"));
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("graph.nodes"), "{}", stderr(&o));

    fs::write(&bad, r#"{"graph": {"nodes": 2, "edges": [[0, 1, 1.0]]}}"#).unwrap();
    let o = hamgraph(&["geodesic", "--config", bad.to_str().unwrap()], &dir.path().join("o4"));
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("hamiltonian"), "{}", stderr(&o));

    let o = hamgraph(&["bridge", "--scenario", "no-such-scenario"], &dir.path().join("o5"));
    assert_eq!(code(&o), 1);
    let o = hamgraph(&["bridge"], &dir.path().join("o6"));
    assert_eq!(code(&o), 1);
}

#[test]
fn stationary_bridge_has_zero_entropy() {
    let dir = TempDir::new().unwrap();
    let o = hamgraph(&["bridge", "--scenario", "stationary-bridge"], dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let r = json(&dir.path().join("report.json"));
    assert!(r["entropy"].as_f64().unwrap().abs() <= 1e-8);
    let b = json(&dir.path().join("bridge.json"));
    for key in ["iterations", "residuals", "entropy", "grid", "f", "g", "rho", "m_hat"] {
        assert!(b.get(key).is_some(), "{key}");
    }
}

#[test]
fn asymmetric_bridge_with_oracle() {
    let dir = TempDir::new().unwrap();
    let o = hamgraph(&["bridge", "--scenario", "two-node-bridge", "--oracle", "8"], dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let r = json(&dir.path().join("report.json"));
    assert!(r["entropy"].as_f64().unwrap() > 0.0);
    for res in r["residuals"].as_array().unwrap() {
        assert!(res.as_f64().unwrap() <= 1e-8);
    }
    // Documented first-order bound: gap <= 0.25 / N.
    let gap = r["oracle"]["gap"].as_f64().unwrap();
    assert!(gap > 0.0 && gap <= 0.25 / 8.0, "{gap}");
}

#[test]
fn bridge_nonconvergence_exits_three() {
    let dir = TempDir::new().unwrap();
    let o = hamgraph(&["bridge", "--scenario", "two-node-bridge", "--tol", "1e-300"], dir.path());
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    let r = json(&dir.path().join("report.json"));
    assert_eq!(r["status"], "nonconvergence");
    assert_eq!(r["residual_history"].as_array().unwrap().len(), 200);
}

#[test]
fn simulate_is_deterministic_for_a_fixed_seed() {
    let dir = TempDir::new().unwrap();
    let args = ["simulate", "--scenario", "two-node-periodic", "--particles", "1", "--seed", "42"];
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(code(&hamgraph(&args, &a)), 0);
    assert_eq!(code(&hamgraph(&args, &b)), 0);
    for f in ["paths.jsonl", "report.json", "trajectory.csv", "run.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn simulate_matches_master_equation() {
    let dir = TempDir::new().unwrap();
    for (name, m) in [("two-node-periodic", "100000"), ("three-node-circle", "20000")] {
        let out = dir.path().join(name);
        let o = hamgraph(&["simulate", "--scenario", name, "--particles", m], &out);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let r = json(&out.join("report.json"));
        let bound = 3.0 * (2.0 / m.parse::<f64>().unwrap()).sqrt();
        assert!((r["tv_bound"].as_f64().unwrap() - bound).abs() < 1e-15);
        assert!(r["max_tv"].as_f64().unwrap() <= bound, "{name}: {}", r["max_tv"]);
        assert_eq!(r["checkpoints"].as_array().unwrap().len(), 10);
    }
}

#[test]
fn zero_generator_keeps_paths_constant() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("zero.json");
    fs::write(
        &cfg,
        r#"{"graph": {"nodes": 2, "edges": [[0, 1, 1.0]]},
            "reference": {"type": "constant", "matrix": [[0, 0], [0, 0]]},
            "initial_density": [0.25, 0.75],
            "sampler": {"particles": 4000, "seed": 3}}"#,
    )
    .unwrap();
    let o = hamgraph(&["simulate", "--config", cfg.to_str().unwrap()], &dir.path().join("out"));
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let paths = fs::read_to_string(dir.path().join("out/paths.jsonl")).unwrap();
    assert!(paths.lines().all(|l| l.contains("\"jumps\":[]")));
    let r = json(&dir.path().join("out/report.json"));
    let tvs: Vec<f64> = r["checkpoints"].as_array().unwrap().iter().map(|c| c["tv"].as_f64().unwrap()).collect();
    // Nothing moves, so the error is the initial sampling error at every checkpoint.
    assert!(tvs.windows(2).all(|w| w[0] == w[1]));
    assert!(tvs[0] <= r["tv_bound"].as_f64().unwrap());
}

#[test]
fn sampler_bound_violation_exits_four() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("bound.json");
    fs::write(
        &cfg,
        r#"{"graph": {"nodes": 2, "edges": [[0, 1, 1.0]]},
            "reference": {"type": "graph_weights"},
            "initial_density": [0.5, 0.5],
            "sampler": {"particles": 10, "rate_bound": 0.5}}"#,
    )
    .unwrap();
    let o = hamgraph(&["simulate", "--config", cfg.to_str().unwrap()], &dir.path().join("out"));
    assert_eq!(code(&o), 4, "{}", stderr(&o));
}

#[test]
fn analyze_reports() {
    let dir = TempDir::new().unwrap();
    let o = hamgraph(&["analyze", "--scenario", "stationary-bridge"], dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let r = json(&dir.path().join("report.json"));
    assert!(r["stationary"]["vector_field_residual"].as_f64().unwrap() <= 1e-9);
    assert_eq!(r["floquet"]["unit_circle_count"], 1);
    assert!(r["symplectic"]["hopf_cole"].as_f64().unwrap() <= 1e-6);
    assert_eq!(r["symplectic"]["passed"], true);

    let o = hamgraph(&["analyze", "--scenario", "two-node-periodic"], &dir.path().join("p"));
    assert_eq!(code(&o), 0);
    let r = json(&dir.path().join("p/report.json"));
    assert!(r["floquet"]["periodic"].as_array().unwrap().len() >= 1);
}

#[test]
fn run_json_reproduces_the_run() {
    let dir = TempDir::new().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let o = hamgraph(
        &["bridge", "--scenario", "two-node-bridge", "--dt", "2e-3", "--tol", "1e-10", "--oracle", "4"],
        &a,
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let run = a.join("run.json");
    let o = hamgraph(&["bridge", "--config", run.to_str().unwrap()], &b);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in ["run.json", "bridge.json", "report.json", "trajectory.csv", "rates.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn help_exits_zero() {
    let o = Command::new(env!("CARGO_BIN_EXE_hamgraph")).arg("--help").output().unwrap();
    assert_eq!(code(&o), 0);
}
