use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn model(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("models").join(name)
}

fn kb(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kb-onestep")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn csv_column(path: &Path, name: &str) -> Vec<f64> {
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let col = header.iter().position(|h| *h == name).unwrap();
    lines.map(|l| l.split(',').nth(col).unwrap().parse().unwrap()).collect()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn simulate_writes_trajectory_and_meta() {
    let dir = tempfile::tempdir().unwrap();
    let ex1 = model("example1.json");
    let out = kb(&[
        "simulate", "--model", ex1.to_str().unwrap(), "--theta", "1.0", "--eps", "0.01", "--steps", "10000",
        "--seed", "7", "-o", dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let t = csv_column(&dir.path().join("trajectory.csv"), "t");
    assert_eq!(t.len(), 10_001);
    let meta = json(&dir.path().join("meta.json"));
    assert_eq!(meta["seed"], 7);
    assert_eq!(meta["eps"], 0.01);
}

#[test]
fn missing_model_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = kb(&["simulate", "--model", "/nonexistent/model.json", "--theta", "1", "-o", dir.path().to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("/nonexistent/model.json"));
}

#[test]
fn bad_parameter_and_thread_settings_are_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let ex1 = model("example1.json");
    let out = kb(&["simulate", "--model", ex1.to_str().unwrap(), "--theta", "3.0", "-o", dir.path().to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    let out = Command::new(env!("CARGO_BIN_EXE_kb-onestep"))
        .args(["bound", "--model", ex1.to_str().unwrap(), "--theta", "1.0"])
        .env("KB_ONESTEP_THREADS", "0")
        .output()
        .unwrap();
    assert_eq!(code(&out), 2);
}

#[test]
fn noise_free_simulation_follows_the_exponential() {
    // a = 1, so y_t = e^t; Euler's relative error is about h t / 2
    let dir = tempfile::tempdir().unwrap();
    let ex1 = model("example1.json");
    let out = kb(&[
        "simulate", "--model", ex1.to_str().unwrap(), "--theta", "1.0", "--eps", "0", "--steps", "100000", "-o",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0);
    let path = dir.path().join("trajectory.csv");
    let (t, y) = (csv_column(&path, "t"), csv_column(&path, "Y"));
    let worst = t.iter().zip(&y).map(|(t, y)| (y - t.exp()).abs()).fold(0.0, f64::max);
    assert!(worst <= 1e-4, "{worst}");
}

#[test]
fn filter_reads_a_stored_trajectory() {
    let dir = tempfile::tempdir().unwrap();
    let ex1 = model("example1.json");
    let traj = dir.path().join("traj");
    assert_eq!(
        code(&kb(&["simulate", "--model", ex1.to_str().unwrap(), "--theta", "1.0", "--steps", "1000", "-o", traj.to_str().unwrap()])),
        0
    );
    let csv = traj.join("trajectory.csv");
    let out = dir.path().join("filter");
    let res = kb(&[
        "filter", "--model", ex1.to_str().unwrap(), "--trajectory", csv.to_str().unwrap(), "--theta", "1.0",
        "--derivative", "-o", out.to_str().unwrap(),
    ]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    let text = std::fs::read_to_string(out.join("filter.csv")).unwrap();
    assert!(text.starts_with("t,m,gamma_star,D,mdot\n"));
    assert_eq!(text.lines().count(), 1002);
}

#[test]
fn noise_free_estimate_is_a_fixed_point() {
    let dir = tempfile::tempdir().unwrap();
    let toy = model("toy.json");
    let res = kb(&[
        "estimate", "--model", toy.to_str().unwrap(), "--eps", "0", "--true-theta", "1.2", "--steps", "10000",
        "--tau", "0.1", "--mstar-times", "0.5,1", "--adaptive", "-o", dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    let report = json(&dir.path().join("estimate.json"));
    let theta_bar = report["prelim"]["theta_bar"].as_f64().unwrap();
    let theta_star = report["onestep"]["theta_star"].as_f64().unwrap();
    assert!((theta_bar - 1.2).abs() < 5e-4 && (theta_star - 1.2).abs() < 5e-4);
    for name in ["process.csv", "mstar.csv", "adaptive.csv"] {
        assert!(dir.path().join(name).exists(), "{name}");
    }
    let m_star = csv_column(&dir.path().join("mstar.csv"), "m_star");
    assert!(m_star.iter().all(|m| (m - 1.0).abs() < 5e-4), "{m_star:?}");
}

#[test]
fn estimate_process_ends_at_the_one_step_estimate() {
    let dir = tempfile::tempdir().unwrap();
    let ex1 = model("example1.json");
    let res = kb(&[
        "estimate", "--model", ex1.to_str().unwrap(), "--true-theta", "1.0", "--steps", "5000", "--seed", "4",
        "--delta", "0.6", "-o", dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&res), 0);
    let report = json(&dir.path().join("estimate.json"));
    let process = csv_column(&dir.path().join("process.csv"), "theta_star");
    assert_eq!(process.last().copied(), report["onestep"]["theta_star"].as_f64());
    assert_eq!(report["process_final"], report["onestep"]["theta_star"]);
}

#[test]
fn estimate_rejects_inadmissible_delta() {
    let dir = tempfile::tempdir().unwrap();
    let ex2 = model("example2.json");
    let res = kb(&[
        "estimate", "--model", ex2.to_str().unwrap(), "--true-theta", "1.0", "--steps", "1000", "--delta", "0.5",
        "-o", dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&res), 2);
}

#[test]
fn montecarlo_smoke_run() {
    let dir = tempfile::tempdir().unwrap();
    let ex1 = model("example1.json");
    let res = kb(&[
        "montecarlo", "--model", ex1.to_str().unwrap(), "--theta", "1.0", "--reps", "2", "--steps", "1000", "-o",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    let agg = json(&dir.path().join("aggregates.json"));
    assert_eq!(agg["schema"], 1);
    let rows = std::fs::read_to_string(dir.path().join("rows.csv")).unwrap();
    assert_eq!(rows.lines().count(), 3);
}

#[test]
fn delta_optimum_assertion_holds_for_example_two() {
    let dir = tempfile::tempdir().unwrap();
    let ex2 = model("example2.json");
    let res = kb(&[
        "montecarlo", "--model", ex2.to_str().unwrap(), "--theta", "1.0", "--delta-sweep", "0.2:0.6:0.1", "--eps",
        "0.01", "--reps", "2000", "--prelim", "example2", "--assert", "delta-optimum", "-o",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    assert!(String::from_utf8_lossy(&res.stderr).contains("PASS delta-optimum"));
    assert_eq!(json(&dir.path().join("aggregates.json"))["argmin_delta"], 0.4);
}

#[test]
fn failed_assertion_exits_four() {
    let dir = tempfile::tempdir().unwrap();
    let ex2 = model("example2.json");
    // the exact inversion has no truncation bias, so its MSE grows with delta
    let res = kb(&[
        "montecarlo", "--model", ex2.to_str().unwrap(), "--theta", "1.0", "--delta-sweep", "0.2:0.6:0.2", "--reps",
        "50", "--steps", "2000", "--assert", "delta-optimum", "-o", dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&res), 4);
    assert!(String::from_utf8_lossy(&res.stderr).contains("FAIL delta-optimum"));
}

#[test]
fn replication_failures_exit_four() {
    let dir = tempfile::tempdir().unwrap();
    let ex2 = model("example2.json");
    // the closed form for f = θ f_t does not apply when θ sits in a
    let res = kb(&[
        "montecarlo", "--model", ex2.to_str().unwrap(), "--theta", "1.0", "--delta", "0.3", "--reps", "10",
        "--steps", "500", "--prelim", "example1", "-o", dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&res), 4, "{}", String::from_utf8_lossy(&res.stderr));
}

#[test]
fn bound_prints_json() {
    let toy = model("toy.json");
    let res = kb(&["bound", "--model", toy.to_str().unwrap(), "--theta", "1.0", "--t", "0.5"]);
    assert_eq!(code(&res), 0);
    let v: serde_json::Value = serde_json::from_slice(&res.stdout).unwrap();
    assert!((v["bound"].as_f64().unwrap() - 0.027_74).abs() < 1e-4);
    assert!((v["fisher"].as_f64().unwrap() - 0.5f64.tanh()).abs() < 1e-7);
}
