//! Black-box tests of the command-line interface: exit codes, artifact
//! files, and determinism across reruns. Each test gets its own directory
//! under the system temp dir, keyed by test name and process id.

use std::path::{Path, PathBuf};
use std::process::Output;

fn temp_dir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("fpf_cli_{tag}_{}", std::process::id()));
    if dir.exists() {
        std::fs::remove_dir_all(&dir).unwrap();
    }
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, body).unwrap();
    path
}

fn run_cli(args: &[&str]) -> Output {
    std::process::Command::new(env!("CARGO_BIN_EXE_fpf"))
        .args(args)
        .output()
        .unwrap()
}

fn linear_preamble() -> &'static str {
    "model=linear\n\
     model.alpha=-0.5\n\
     model.gamma=3\n\
     model.sigma_b=1\n\
     model.sigma_w=0.5\n\
     model.init_mean=1\n\
     model.init_var=1\n"
}

#[test]
fn run_writes_artifacts_and_exits_zero() {
    let dir = temp_dir("run_ok");
    let config = write_config(
        &dir,
        "kalman.cfg",
        &format!(
            "{}filter=kalman\ndt=0.01\nhorizon=0.1\nseed=11\ntrials=1\noutput_dir={}\n",
            linear_preamble(),
            dir.display()
        ),
    );
    let out = run_cli(&["run", config.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("ran 1 trial(s): 0 collapsed, 0 diverged"), "stdout: {stdout}");
    for name in ["truth.csv", "estimate_kalman.csv", "report.txt"] {
        assert!(dir.join(name).exists(), "{name} missing");
    }
}

#[test]
fn rerun_is_byte_identical() {
    let dir_a = temp_dir("rerun_a");
    let dir_b = temp_dir("rerun_b");
    let body = |out: &Path| {
        format!(
            "{}filter=fpf\ngain=exact_linear\nn_particles=64\ndt=0.01\nhorizon=0.2\nseed=12\ntrials=1\noutput_dir={}\n",
            linear_preamble(),
            out.display()
        )
    };
    let config_a = write_config(&dir_a, "a.cfg", &body(&dir_a));
    let config_b = write_config(&dir_b, "b.cfg", &body(&dir_b));
    assert_eq!(run_cli(&["run", config_a.to_str().unwrap()]).status.code(), Some(0));
    assert_eq!(run_cli(&["run", config_b.to_str().unwrap()]).status.code(), Some(0));
    for name in ["truth.csv", "estimate_fpf.csv"] {
        let a = std::fs::read(dir_a.join(name)).unwrap();
        let b = std::fs::read(dir_b.join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between identical runs");
    }
}

#[test]
fn bad_config_value_exits_two_and_writes_nothing() {
    let dir = temp_dir("bad_filter");
    let config = write_config(
        &dir,
        "bad.cfg",
        &format!(
            "{}filter=warp\ndt=0.01\nhorizon=0.1\nseed=1\noutput_dir={}\n",
            linear_preamble(),
            dir.display()
        ),
    );
    let out = run_cli(&["run", config.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!out.stderr.is_empty());
    assert!(!dir.join("truth.csv").exists());
    assert!(!dir.join("report.txt").exists());
}

#[test]
fn zero_trials_override_exits_two() {
    let dir = temp_dir("zero_trials");
    let config = write_config(
        &dir,
        "kalman.cfg",
        &format!(
            "{}filter=kalman\ndt=0.01\nhorizon=0.1\nseed=1\noutput_dir={}\n",
            linear_preamble(),
            dir.display()
        ),
    );
    let out = run_cli(&["run", config.to_str().unwrap(), "--trials", "0"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_config_exits_two() {
    let out = run_cli(&["run", "/nonexistent/fpf.cfg"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!out.stderr.is_empty());
}

#[test]
fn compare_writes_comparison_csv() {
    let dir = temp_dir("compare");
    let tail = "dt=0.01\nhorizon=0.1\nseed=13\ntrials=2\n";
    let kalman = write_config(
        &dir,
        "kalman.cfg",
        &format!("{}filter=kalman\n{tail}", linear_preamble()),
    );
    let bootstrap = write_config(
        &dir,
        "bootstrap.cfg",
        &format!(
            "{}filter=bootstrap\nn_particles=64\nresample_threshold=0.5\n{tail}",
            linear_preamble()
        ),
    );
    let out = run_cli(&[
        "compare",
        kalman.to_str().unwrap(),
        bootstrap.to_str().unwrap(),
        "--out",
        dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("compared 2 config(s)"));
    let csv = std::fs::read_to_string(dir.join("comparison.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3, "header plus one row per config");
    assert!(csv.lines().skip(1).any(|l| l.contains("kalman")));
    assert!(csv.lines().skip(1).any(|l| l.contains("bootstrap")));
}

#[test]
fn gaindump_writes_one_row_per_particle() {
    let dir = temp_dir("gaindump");
    let config = write_config(
        &dir,
        "fpf.cfg",
        &format!(
            "{}filter=fpf\ngain=exact_linear\nn_particles=32\ndt=0.01\nhorizon=0.1\nseed=14\noutput_dir={}\n",
            linear_preamble(),
            dir.display()
        ),
    );
    let out = run_cli(&["gaindump", config.to_str().unwrap(), "--at", "0.05"]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.join("gain_at_0.05.csv")).unwrap();
    assert_eq!(csv.lines().count(), 33, "header plus one row per particle");
}

#[test]
fn gaindump_rejects_non_fpf_config() {
    let dir = temp_dir("gaindump_kalman");
    let config = write_config(
        &dir,
        "kalman.cfg",
        &format!(
            "{}filter=kalman\ndt=0.01\nhorizon=0.1\nseed=1\noutput_dir={}\n",
            linear_preamble(),
            dir.display()
        ),
    );
    let out = run_cli(&["gaindump", config.to_str().unwrap(), "--at", "0.05"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn env_output_dir_is_honored() {
    let dir = temp_dir("env_out");
    // No output_dir key: the directory comes from the environment.
    let config = write_config(
        &dir,
        "kalman.cfg",
        &format!("{}filter=kalman\ndt=0.01\nhorizon=0.1\nseed=15\n", linear_preamble()),
    );
    let out = std::process::Command::new(env!("CARGO_BIN_EXE_fpf"))
        .args(["run", config.to_str().unwrap()])
        .env("FPF_OUT_DIR", &dir)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.join("truth.csv").exists());
    assert!(dir.join("report.txt").exists());
}

#[test]
fn weight_collapse_exits_three() {
    let dir = temp_dir("collapse");
    // Near-deterministic observations with a tiny ensemble concentrate
    // all weight on one particle within a step.
    let config = write_config(
        &dir,
        "collapse.cfg",
        &format!(
            "model=linear\nmodel.alpha=0\nmodel.gamma=10\nmodel.sigma_b=0\nmodel.sigma_w=0.001\n\
             model.init_mean=0\nmodel.init_var=1\n\
             filter=bootstrap\nn_particles=8\nresample_threshold=0.5\n\
             dt=0.01\nhorizon=0.05\nseed=2\ntrials=1\noutput_dir={}\n",
            dir.display()
        ),
    );
    let out = run_cli(&["run", config.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("1 collapsed"), "stdout: {stdout}");
    assert!(dir.join("report.txt").exists());
}

#[test]
fn divergence_exits_four() {
    let dir = temp_dir("diverge");
    // An Euler step of the double-well drift at dt=10 explodes cubically
    // within a few steps.
    let config = write_config(
        &dir,
        "diverge.cfg",
        &format!(
            "model=double_well\nmodel.sigma_b=0.4\nmodel.sigma_w=0.2\n\
             filter=fpf\ngain=dns\nn_particles=4\n\
             dt=10\nhorizon=200\nseed=3\ntrials=1\noutput_dir={}\n",
            dir.display()
        ),
    );
    let out = run_cli(&["run", config.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(4), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("1 diverged"), "stdout: {stdout}");
}
