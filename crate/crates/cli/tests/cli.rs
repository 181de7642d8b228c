//! End-to-end tests that drive the compiled binary the way a user would.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use blochdesign::io::{read_magnetization_csv, read_pulse_csv, write_grid_csv, write_pulse_csv};
use blochdesign::{nrmse, simulate_final, Magnetization, Pulse, SpinGrid};
use blochdesign_cli::config::DesignConfig;

const BIN: &str = env!("CARGO_BIN_EXE_blochdesign");

fn smoke_config() -> String {
    format!("{}/../../configs/smoke_iv180.json", env!("CARGO_MANIFEST_DIR"))
}

fn run(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .output()
        .expect("binary launches")
}

fn stdout(output: &Output) -> String {
    String::from_utf8_lossy(&output.stdout).into_owned()
}

fn stderr(output: &Output) -> String {
    String::from_utf8_lossy(&output.stderr).into_owned()
}

#[test]
fn design_writes_consistent_artifacts() {
    let out = tempfile::tempdir().unwrap();
    let out_str = out.path().to_str().unwrap();
    let config_path = smoke_config();
    let output = run(&["design", "--config", &config_path, "--out", out_str]);
    assert!(output.status.success(), "stderr: {}", stderr(&output));
    for name in ["pulse.csv", "history.csv", "final_mag.csv", "report.json"] {
        assert!(out.path().join(name).exists(), "{name} missing");
    }

    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.path().join("report.json")).unwrap())
            .unwrap();
    let (config, base) = DesignConfig::load(Path::new(&config_path)).unwrap();
    let problem = config.problem(&base).unwrap();
    let pulse = read_pulse_csv(&out.path().join("pulse.csv")).unwrap();
    let mag = read_magnetization_csv(&out.path().join("final_mag.csv")).unwrap();

    let m0 = Magnetization::equilibrium(problem.grid.n_voxels());
    let resimulated = simulate_final(&pulse, &problem.grid, &m0, &problem.consts).unwrap();
    assert_eq!(resimulated.m, mag.m, "final_mag.csv disagrees with pulse.csv");
    let recomputed = nrmse(&mag, &problem.target, problem.loss.kind).unwrap();
    assert_eq!(
        recomputed,
        report["nrmse"].as_f64().unwrap(),
        "report nrmse disagrees with the exported files"
    );

    assert_eq!(*pulse.grad.last().unwrap(), [0.0, 0.0, 0.0]);
    assert!(pulse.peak_rf() <= problem.limits.b_max);
    assert!(pulse.peak_grad() <= problem.limits.g_max);
    assert_eq!(
        pulse.n_samples() as u64,
        report["n_samples"].as_u64().unwrap()
    );
    let history = fs::read_to_string(out.path().join("history.csv")).unwrap();
    assert!(history.starts_with("iter,block,loss"));
    assert!(history.lines().count() > 2);
}

#[test]
fn design_rejects_infeasible_limits_before_writing() {
    let dir = tempfile::tempdir().unwrap();
    let mut config: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(smoke_config()).unwrap()).unwrap();
    config["limits"]["b_max_gauss"] = (-1.0).into();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, config.to_string()).unwrap();
    let out = dir.path().join("out");
    let output = run(&[
        "design",
        "--config",
        bad.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(output.status.code(), Some(2), "stderr: {}", stderr(&output));
    assert!(stderr(&output).contains("b_max"));
    assert!(!out.join("pulse.csv").exists());
}

#[test]
fn simulate_keeps_equilibrium_under_a_zero_pulse() {
    let dir = tempfile::tempdir().unwrap();
    let grid_path = dir.path().join("grid.csv");
    write_grid_csv(&grid_path, &SpinGrid::regular([2, 3, 1], [4.0, 6.0, 1.0], 1.0, 0.1)).unwrap();
    let pulse_path = dir.path().join("pulse.csv");
    write_pulse_csv(&pulse_path, &Pulse::zeros(5, 4e-6)).unwrap();
    let output = run(&[
        "simulate",
        "--grid",
        grid_path.to_str().unwrap(),
        "--pulse",
        pulse_path.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
        "--threads",
        "1",
    ]);
    assert!(output.status.success(), "stderr: {}", stderr(&output));
    let mag = read_magnetization_csv(&dir.path().join("final_mag.csv")).unwrap();
    assert_eq!(mag.m, vec![[0.0, 0.0, 1.0]; 6]);
}

#[test]
fn eval_identity_perturbation_matches_baseline_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let out_str = dir.path().to_str().unwrap();
    let config_path = smoke_config();
    let output = run(&["init", "--config", &config_path, "--out", out_str]);
    assert!(output.status.success(), "stderr: {}", stderr(&output));
    let pulse_path = dir.path().join("pulse.csv");

    let output = run(&[
        "eval",
        "--config",
        &config_path,
        "--pulse",
        pulse_path.to_str().unwrap(),
        "--perturb",
        "0:1",
        "--out",
        out_str,
    ]);
    assert!(output.status.success(), "stderr: {}", stderr(&output));
    let table = fs::read_to_string(dir.path().join("eval.csv")).unwrap();
    let row = table.lines().nth(1).unwrap();
    let delta: f64 = row.rsplit(',').next().unwrap().parse().unwrap();
    assert_eq!(delta, 0.0, "identity perturbation moved nrmse: {row}");
}

#[test]
fn eval_rejects_a_delay_longer_than_the_pulse() {
    let dir = tempfile::tempdir().unwrap();
    let pulse_path = dir.path().join("pulse.csv");
    write_pulse_csv(&pulse_path, &Pulse::zeros(5, 4e-6)).unwrap();
    let output = run(&[
        "eval",
        "--config",
        &smoke_config(),
        "--pulse",
        pulse_path.to_str().unwrap(),
        "--perturb",
        "5:1",
    ]);
    assert_eq!(output.status.code(), Some(2), "stderr: {}", stderr(&output));
    assert!(stderr(&output).contains("delay"));
}

#[test]
fn gradcheck_accepts_the_smoke_problem() {
    let output = run(&[
        "gradcheck",
        "--config",
        &smoke_config(),
        "--samples",
        "60",
        "--seed",
        "7",
    ]);
    assert!(output.status.success(), "stderr: {}", stderr(&output));
    let text = stdout(&output);
    assert!(text.contains("OK"), "stdout: {text}");
    assert!(text.contains("max rel err"), "stdout: {text}");
}

#[test]
fn init_writes_a_feasible_starting_pulse() {
    let dir = tempfile::tempdir().unwrap();
    let out_str = dir.path().to_str().unwrap();
    let config_path = smoke_config();
    let output = run(&["init", "--config", &config_path, "--out", out_str]);
    assert!(output.status.success(), "stderr: {}", stderr(&output));
    let pulse = read_pulse_csv(&dir.path().join("pulse.csv")).unwrap();
    let (config, base) = DesignConfig::load(Path::new(&config_path)).unwrap();
    let problem = config.problem(&base).unwrap();
    assert!(pulse.n_samples() > 0);
    assert!(pulse.peak_rf() < problem.limits.b_max);
    assert!(pulse.peak_grad() < problem.limits.g_max);
}
