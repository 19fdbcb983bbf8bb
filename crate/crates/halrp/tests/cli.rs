//! End-to-end checks of the installed binary.

use std::path::{Path, PathBuf};
use std::process::Command;

fn halrp() -> Command {
    Command::new(env!("CARGO_BIN_EXE_halrp"))
}

fn tmp(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join("halrp_cli_bin_tests").join(name);
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn write_cfg(dir: &Path) -> PathBuf {
    let path = dir.join("run.cfg");
    std::fs::write(
        &path,
        "mode = halrp\nepochs = 6\nwarmup_epochs = 1\nlr = 0.1\nbatch_size = 16\n\
         arch = dense(10) relu\ndata = permuted\ntasks = 3\nclasses = 3\n\
         dims = 16\nsamples_per_class = 40\nnoise = 0.1\ndata_seed = 11\n",
    )
    .unwrap();
    path
}

fn strip_wall(csv: &str) -> String {
    csv.lines()
        .map(|l| {
            if l.starts_with('#') || l.starts_with("task_index") {
                l.to_string()
            } else {
                l.rsplit_once(',')
                    .map(|(h, _)| h.to_string())
                    .unwrap_or_default()
            }
        })
        .collect::<Vec<_>>()
        .join("\n")
}

#[test]
fn run_twice_produces_identical_results() {
    let dir = tmp("determinism");
    let cfg = write_cfg(&dir);
    for sub in ["a", "b"] {
        let status = halrp()
            .args(["run", "--config"])
            .arg(&cfg)
            .args(["--seed", "0", "--out"])
            .arg(dir.join(sub))
            .status()
            .unwrap();
        assert!(status.success());
    }
    let csv_a = std::fs::read_to_string(dir.join("a/results.csv")).unwrap();
    let csv_b = std::fs::read_to_string(dir.join("b/results.csv")).unwrap();
    assert_eq!(strip_wall(&csv_a), strip_wall(&csv_b));
    assert_eq!(
        std::fs::read(dir.join("a/checkpoint.halrp")).unwrap(),
        std::fs::read(dir.join("b/checkpoint.halrp")).unwrap()
    );
}

#[test]
fn missing_required_key_fails_and_names_it() {
    let dir = tmp("missing_key");
    let path = dir.join("broken.cfg");
    std::fs::write(&path, "epochs = 5\ndata = permuted\narch = dense(4)\n").unwrap();
    let output = halrp()
        .args(["run", "--config"])
        .arg(&path)
        .output()
        .unwrap();
    assert!(!output.status.success());
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("tasks"), "stderr: {stderr}");
}

#[test]
fn unknown_config_key_reports_line() {
    let dir = tmp("unknown_key");
    let path = dir.join("typo.cfg");
    std::fs::write(&path, "epochs = 5\nlaerning_rate = 0.1\n").unwrap();
    let output = halrp()
        .args(["run", "--config"])
        .arg(&path)
        .output()
        .unwrap();
    assert!(!output.status.success());
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("line 2"), "stderr: {stderr}");
    assert!(stderr.contains("laerning_rate"), "stderr: {stderr}");
}

#[test]
fn verify_command_passes() {
    let output = halrp().arg("verify").output().unwrap();
    assert!(output.status.success());
    let stdout = String::from_utf8_lossy(&output.stdout);
    for suite in [
        "eckart-young",
        "lse-closed-form",
        "scaling-invariance",
        "rank-greedy",
        "quadratic-bound",
        "gradient-check",
    ] {
        assert!(
            stdout.contains(suite),
            "missing suite {suite} in:\n{stdout}"
        );
    }
    assert!(!stdout.contains("FAIL"));
}

#[test]
fn orders_accepts_explicit_lists_and_echoes_them() {
    let dir = tmp("orders");
    let cfg = write_cfg(&dir);
    let output = halrp()
        .args(["orders", "--config"])
        .arg(&cfg)
        .args(["--order-list", "[2,0,1];[1,0,2]", "--out"])
        .arg(dir.join("sweep"))
        .output()
        .unwrap();
    assert!(output.status.success());
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert!(stdout.contains("[2,0,1]"), "stdout: {stdout}");
    assert!(stdout.contains("MOPD"), "stdout: {stdout}");
    assert!(dir.join("sweep/orders.csv").exists());
    assert!(dir.join("sweep/order_1/summary.json").exists());
}

#[test]
fn default_hyperparameters_complete_with_zero_bwt() {
    // Training keys left unset fall back to the stock defaults
    // (20 epochs, 1 warm-up, alpha 0.9, lr 1e-3, lambdas 1e-4, batch 128);
    // with pruning off the run must report bwt = 0.
    let dir = tmp("defaults");
    let path = dir.join("defaults.cfg");
    std::fs::write(
        &path,
        "arch = dense(16) relu\ndata = permuted\ntasks = 5\nclasses = 4\n\
         dims = 24\nsamples_per_class = 150\nnoise = 0.15\ndata_seed = 3\n",
    )
    .unwrap();
    let output = halrp()
        .args(["run", "--config"])
        .arg(&path)
        .args(["--seed", "0", "--out"])
        .arg(dir.join("out"))
        .output()
        .unwrap();
    assert!(output.status.success());
    let json = std::fs::read_to_string(dir.join("out/summary.json")).unwrap();
    assert!(json.contains("\"final_bwt\": 0.0"), "{json}");
    assert!(json.contains("epochs = 20"), "{json}");
    assert!(json.contains("lambda0 = 0.0001"), "{json}");
}

#[test]
fn flags_override_config_keys() {
    let dir = tmp("overrides");
    let cfg = write_cfg(&dir);
    let status = halrp()
        .args(["run", "--config"])
        .arg(&cfg)
        .args(["--mode", "stl", "--epochs", "2", "--out"])
        .arg(dir.join("stl"))
        .status()
        .unwrap();
    assert!(status.success());
    let json = std::fs::read_to_string(dir.join("stl/summary.json")).unwrap();
    assert!(json.contains("\"mode\": \"stl\""), "{json}");
    assert!(json.contains("epochs = 2"), "{json}");
}
