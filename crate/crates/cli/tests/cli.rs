use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn ddsindy(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ddsindy"))
        .args(args)
        .current_dir(cwd)
        .env("DDSINDY_OUT", cwd.join("out"))
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn simulate_writes_csv_and_metadata() {
    let dir = tempfile::tempdir().unwrap();
    let out = ddsindy(&["simulate", "--benchmark", "logistic_re", "--out", "sim"], dir.path());
    ok(&out);
    let csv = fs::read_to_string(dir.path().join("sim/logistic_re.csv")).unwrap();
    let after: Vec<&str> = csv.lines().skip_while(|l| !l.starts_with("# --- t0")).skip(1).collect();
    assert_eq!(after.len(), 100);
    let meta = fs::read_to_string(dir.path().join("sim/logistic_re.meta.toml")).unwrap();
    assert!(meta.contains("benchmark = \"logistic_re\""));
    assert!(meta.contains("sig*x1d^2"));
}

#[test]
fn unknown_benchmark_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = ddsindy(&["simulate", "--benchmark", "nosuch"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nosuch"));
}

#[test]
fn missing_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = ddsindy(&["identify", "--config", "absent.toml"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn noisy_simulation_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    for run in ["a", "b"] {
        ok(&ddsindy(
            &["simulate", "--benchmark", "ricker_simple", "--noise", "0.2", "--seed", "7", "--out", run],
            dir.path(),
        ));
    }
    let a = fs::read(dir.path().join("a/ricker_simple.csv")).unwrap();
    let b = fs::read(dir.path().join("b/ricker_simple.csv")).unwrap();
    assert_eq!(a, b);
    ok(&ddsindy(&["simulate", "--benchmark", "ricker_simple", "--noise", "0.2", "--seed", "8", "--out", "c"], dir.path()));
    assert_ne!(a, fs::read(dir.path().join("c/ricker_simple.csv")).unwrap());
}

#[test]
fn identify_logistic_then_merge_reports() {
    let dir = tempfile::tempdir().unwrap();
    ok(&ddsindy(&["identify", "--benchmark", "logistic_re", "--K", "64", "--name", "k64", "--out", "k64"], dir.path()));
    ok(&ddsindy(&["identify", "--benchmark", "logistic_re", "--K", "16", "--name", "k16", "--out", "k16"], dir.path()));
    for f in ["model.txt", "report.txt", "report.csv", "fit.csv", "kernel.csv", "config.toml"] {
        assert!(dir.path().join("k64").join(f).exists(), "{f}");
    }
    let report = fs::read_to_string(dir.path().join("k64/report.csv")).unwrap();
    let line = report.lines().find(|l| l.starts_with("k64,coefficient,1,sig*x1d,")).unwrap();
    let err: f64 = line.rsplit(',').next().unwrap().parse().unwrap();
    assert!(err < 5e-2, "{line}");

    let args = ["report", "k64/report.csv", "k16/report.csv", "k64/report.csv", "--out", "rep"];
    ok(&ddsindy(&args, dir.path()));
    let table = fs::read_to_string(dir.path().join("rep/comparison.txt")).unwrap();
    let head = table.lines().next().unwrap();
    assert!(head.contains("k64") && head.contains("k16"));
    let merged = fs::read_to_string(dir.path().join("rep/comparison.csv")).unwrap();
    assert_eq!(merged.lines().filter(|l| l.starts_with("k64,")).count(), report.lines().count() - 1);

    let out = ddsindy(&["report", "missing.csv"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn optimize_is_deterministic_and_finds_window() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("run.toml"),
        r#"
[data]
benchmark = "logistic_re"

[quadrature]
kind = "trapezoid"
K = 32
window = "optimize"

[optimize]
particles = 8
max_evals = 80
seed = 3

[optimize.params]
tau = { min = 1.5, max = 4.0 }

[optimize.bind]
window_lower = "-tau"
"#,
    )
    .unwrap();
    for run in ["a", "b"] {
        ok(&ddsindy(&["optimize", "--config", "run.toml", "--out", run], dir.path()));
    }
    let read = |r: &str, f: &str| fs::read_to_string(dir.path().join(r).join(f)).unwrap();
    assert_eq!(read("a", "trace.csv"), read("b", "trace.csv"));
    assert_eq!(read("a", "optimum.toml"), read("b", "optimum.toml"));
    let opt: toml::Table = read("a", "optimum.toml").parse().unwrap();
    let tau = opt["params"]["tau"].as_float().unwrap();
    assert!((tau - 3.0).abs() < 0.05, "tau = {tau}");
}

#[test]
fn default_output_directory_follows_environment() {
    let dir = tempfile::tempdir().unwrap();
    ok(&ddsindy(&["simulate", "--benchmark", "daphnia"], dir.path()));
    assert!(dir.path().join("out/daphnia/daphnia.csv").exists());
}
