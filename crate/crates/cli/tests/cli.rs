use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mmtrack::config::load_scenario;
use mmtrack::sim::SimTrace;

const PLANAR: &str = r#"
[robot]
preset = "planar_two_link"

[pomptc]
c_pose = [50000.0, 50000.0, 0.0, 0.0, 0.0, 0.0]

[pd]
kp = 50.0
kd = 5.0

[scenario]
duration = 0.3
initial_arm = [0.3, 1.2]
reference = { kind = "circle", radius = 0.05, angular_rate = 1.0 }
"#;

fn mmtrack(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mmtrack"))
        .args(args)
        .env_remove("RUST_LOG")
        .output()
        .expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn simulate_writes_trace_metrics_and_plots() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "planar.toml", PLANAR);
    let out = dir.path().join("run");
    let o = mmtrack(&["simulate", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(o.stderr.is_empty(), "success wrote to stderr: {}", stderr(&o));

    let csv = fs::read_to_string(out.join("trace.csv")).unwrap();
    assert!(!csv.contains('\r'));
    let records = SimTrace::records_from_csv(&csv).unwrap();
    assert_eq!(records.len(), 301);

    let metrics: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
    assert!(metrics["steady_state_pos_err"].as_f64().unwrap() < 0.01);
    for panel in [
        "path",
        "position_error",
        "joint_angles",
        "joint_velocities",
        "torques",
        "orientation",
        "orientation_error",
    ] {
        assert!(out.join(format!("plot_{panel}.py")).exists(), "{panel}");
    }
}

#[test]
fn simulate_missing_config_names_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.toml");
    let o = mmtrack(&["simulate", "--config", s(&missing), "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains(s(&missing)), "{}", stderr(&o));
}

#[test]
fn simulate_degenerate_limits_cites_index() {
    let dir = tempfile::tempdir().unwrap();
    let mut scenario = load_scenario(PLANAR).unwrap();
    scenario.model.limits.q_lower[7] = scenario.model.limits.q_upper[7] + 0.1;
    let cfg = write(dir.path(), "bad.toml", &scenario.to_toml().unwrap());
    let o = mmtrack(&["simulate", "--config", s(&cfg), "--out", s(&dir.path().join("run"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("index 7"), "{}", stderr(&o));
}

const ONE_VAR: &str = "dims 1 1\nS\n2\nG\n-4\nH\n1\nw\n1\n";

#[test]
fn solve_qp_oracle_reports_clipped_minimizer() {
    let dir = tempfile::tempdir().unwrap();
    let p = write(dir.path(), "qp.txt", ONE_VAR);
    let o = mmtrack(&["solve-qp", "--problem", s(&p), "--solver", "oracle"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(o.stderr.is_empty());
    let out = stdout(&o);
    let line = out.lines().find(|l| l.starts_with("oracle z* = ")).unwrap();
    let z: f64 = line.trim_start_matches("oracle z* = [").trim_end_matches(']').parse().unwrap();
    assert!((z - 1.0).abs() < 1e-12, "{out}");
}

#[test]
fn solve_qp_both_reports_difference_and_bound() {
    let dir = tempfile::tempdir().unwrap();
    let p = write(dir.path(), "qp.txt", ONE_VAR);
    let o = mmtrack(&["solve-qp", "--problem", s(&p), "--solver", "both"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("ftcnd converge_time"), "{out}");
    assert!(out.contains("within bound: true"), "{out}");
    let line = out.lines().find(|l| l.starts_with("|z_ftcnd - z_oracle|_inf")).unwrap();
    let diff: f64 = line.split_whitespace().nth(4).unwrap().parse().unwrap();
    assert!(diff < 1e-4, "{out}");
}

#[test]
fn solve_qp_rejects_empty_and_malformed_files() {
    let dir = tempfile::tempdir().unwrap();
    for (name, text) in [("empty.txt", ""), ("bad.txt", "dims 1 1\nS\nx\n")] {
        let p = write(dir.path(), name, text);
        let o = mmtrack(&["solve-qp", "--problem", s(&p), "--solver", "ftcnd"]);
        assert_eq!(o.status.code(), Some(1), "{name}");
    }
}

#[test]
fn solve_qp_budget_exhaustion_is_a_solver_failure() {
    let dir = tempfile::tempdir().unwrap();
    let p = write(dir.path(), "qp.txt", ONE_VAR);
    let o = mmtrack(&["solve-qp", "--problem", s(&p), "--solver", "ftcnd", "--max-time", "1e-6"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn compare_requires_two_known_controllers() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "planar.toml", PLANAR);
    let out = dir.path().join("cmp");
    let single = mmtrack(&["compare", "--config", s(&cfg), "--controllers", "nftsm", "--out", s(&out)]);
    assert_eq!(single.status.code(), Some(1));
    let unknown = mmtrack(&["compare", "--config", s(&cfg), "--controllers", "nftsm,lqr", "--out", s(&out)]);
    assert_eq!(unknown.status.code(), Some(1));
    assert!(stderr(&unknown).contains("lqr"));
}

#[test]
fn compare_writes_side_by_side_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "planar.toml", PLANAR);
    let out = dir.path().join("cmp");
    let o = Command::new(env!("CARGO_BIN_EXE_mmtrack"))
        .args(["compare", "--config", s(&cfg), "--controllers", "nftsm,pd,nftsm-no-taub", "--out", s(&out)])
        .env("MMTRACK_THREADS", "2")
        .env_remove("RUST_LOG")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(o.stderr.is_empty());
    let errors = fs::read_to_string(out.join("errors.csv")).unwrap();
    let header = errors.lines().next().unwrap();
    assert_eq!(
        header,
        "time,pos_err_nftsm,ori_err_nftsm,pos_err_pd,ori_err_pd,pos_err_nftsm-no-taub,ori_err_nftsm-no-taub"
    );
    assert_eq!(errors.lines().count(), 302);
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    for c in ["nftsm", "pd", "nftsm-no-taub"] {
        assert!(summary[c]["steady_state_pos_err"].is_number(), "{c}");
        assert!(out.join(format!("trace_{c}.csv")).exists());
    }
    assert!(stdout(&o).contains("nftsm-no-taub"));
}
