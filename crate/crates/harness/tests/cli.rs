use std::path::Path;
use std::process::Command;

fn gpabc() -> Command {
    Command::new(env!("CARGO_BIN_EXE_gpabc"))
}

fn write_config(dir: &Path, body: &str) -> std::path::PathBuf {
    let p = dir.join("cfg.toml");
    std::fs::write(&p, body).unwrap();
    p
}

const SMALL: &str = "simulator = \"unimodal\"\nt0 = 5\nt_max = 15\ngrid_resolution = 20\ntv_resolution = 20\n";

#[test]
fn run_writes_trace_and_result() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("out");
    let st = gpabc()
        .args(["run", "--config"])
        .arg(&cfg)
        .args(["--seed", "3", "--rule", "lcb", "--out"])
        .arg(&out)
        .status()
        .unwrap();
    assert!(st.success());
    let trace = std::fs::read_to_string(out.join("trace.csv")).unwrap();
    assert_eq!(trace.lines().next().unwrap(), "iter,theta_1,theta_2,delta,epsilon,tv,wall_ms");
    assert_eq!(trace.lines().count(), 12);
    assert!(out.join("result.json").exists());
}

#[test]
fn repeated_runs_are_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let mut traces = Vec::new();
    for k in 0..2 {
        let out = dir.path().join(format!("o{k}"));
        let st = gpabc().args(["run", "--config"]).arg(&cfg).args(["--seed", "9", "--out"]).arg(&out).status().unwrap();
        assert!(st.success());
        traces.push(std::fs::read(out.join("trace.csv")).unwrap());
    }
    assert_eq!(traces[0], traces[1]);
}

#[test]
fn multiple_reps_go_to_subdirectories() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("out");
    let st = gpabc()
        .args(["run", "--config"])
        .arg(&cfg)
        .args(["--reps", "2", "--threads", "2", "--rule", "unif", "--out"])
        .arg(&out)
        .status()
        .unwrap();
    assert!(st.success());
    assert!(out.join("rep_0/trace.csv").exists() && out.join("rep_1/trace.csv").exists());
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "t0 = 1\n");
    let st = gpabc().args(["run", "--config"]).arg(&cfg).status().unwrap();
    assert_eq!(st.code(), Some(2));
    let cfg = write_config(dir.path(), "bogus_key = 3\n");
    let st = gpabc().args(["run", "--config"]).arg(&cfg).status().unwrap();
    assert_eq!(st.code(), Some(2));
    let st = gpabc().args(["run", "--config"]).arg(dir.path().join("missing.toml")).status().unwrap();
    assert_eq!(st.code(), Some(2));
}

#[test]
fn benchmark_writes_table() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &format!("{SMALL}problems = [\"unimodal\"]\nrules = [\"expintvar\", \"unif\"]\n"));
    let out = dir.path().join("bench");
    let st = gpabc()
        .args(["benchmark", "--config"])
        .arg(&cfg)
        .args(["--reps", "2", "--threads", "1", "--out"])
        .arg(&out)
        .status()
        .unwrap();
    assert!(st.success());
    let table = std::fs::read_to_string(out.join("table.csv")).unwrap();
    let mut lines = table.lines();
    assert_eq!(lines.next().unwrap(), "problem,rule,median_auc,ratio_vs_expintvar,reps");
    let first: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(&first[..2], &["unimodal", "expintvar"]);
    assert_eq!(first[3], "1.00");
    assert_eq!(first[4], "2");
}

#[test]
fn eval_tv_of_density_files() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    std::fs::write(&a, "theta_1,density\n0.5,1\n1.5,0\n").unwrap();
    std::fs::write(&b, "theta_1,density\n0.5,0\n1.5,3\n").unwrap();
    let out = gpabc().arg("eval-tv").arg(&a).arg(&b).output().unwrap();
    assert!(out.status.success());
    assert_eq!(String::from_utf8(out.stdout).unwrap().trim(), "1");
    let out = gpabc().arg("eval-tv").arg(&a).arg(&a).output().unwrap();
    assert_eq!(String::from_utf8(out.stdout).unwrap().trim(), "0");
    std::fs::write(&b, "theta_1,density\n0.5,0\n1.5,0\n").unwrap();
    assert_eq!(gpabc().arg("eval-tv").arg(&a).arg(&b).status().unwrap().code(), Some(2));
}

#[test]
fn simulate_prints_draws() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "simulator = \"lotka_volterra\"\n");
    let out = gpabc().args(["simulate", "--config"]).arg(&cfg).args(["--theta", "1,1", "--n", "3"]).output().unwrap();
    assert!(out.status.success());
    let vals: Vec<f64> = String::from_utf8(out.stdout).unwrap().lines().map(|l| l.parse().unwrap()).collect();
    assert_eq!(vals.len(), 3);
    let st = gpabc().args(["simulate", "--config"]).arg(&cfg).args(["--theta", "5,0"]).status().unwrap();
    assert_eq!(st.code(), Some(4));
}
