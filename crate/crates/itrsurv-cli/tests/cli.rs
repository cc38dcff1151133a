//! End-to-end checks of the command-line interface: subcommand output,
//! config merging, determinism across worker counts, crash resume, and
//! clean failures on bad input.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn itrsurv(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_itrsurv"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn assert_success(output: &Output) {
    assert!(
        output.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&output.stdout),
        String::from_utf8_lossy(&output.stderr)
    );
}

#[test]
fn generate_is_seeded_and_writes_the_documented_header() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    let c = dir.path().join("c.csv");
    for (path, seed) in [(&a, "7"), (&b, "7"), (&c, "8")] {
        let out = itrsurv(&[
            "generate",
            "--scenario",
            "1",
            "--n",
            "200",
            "--seed",
            seed,
            "--out",
            path.to_str().unwrap(),
        ]);
        assert_success(&out);
    }
    let text = fs::read_to_string(&a).unwrap();
    let header = text.lines().next().unwrap();
    assert!(header.starts_with("z,delta,a,x1,"));
    assert!(header.ends_with(",x19"));
    assert_eq!(text.lines().count(), 201);

    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_ne!(fs::read(&a).unwrap(), fs::read(&c).unwrap());
}

#[test]
fn generate_accepts_scenario_and_covariate_files() {
    let dir = tempfile::tempdir().unwrap();
    // Round-trip the built-in definitions through their TOML form.
    let scenario_toml = dir.path().join("scenario.toml");
    fs::write(
        &scenario_toml,
        itrsurv::dgp::ScenarioSpec::builtin(2).unwrap().to_toml_string(),
    )
    .unwrap();
    let covariates_toml = dir.path().join("covariates.toml");
    fs::write(
        &covariates_toml,
        itrsurv::dgp::CovariateModel::default().to_toml_string(),
    )
    .unwrap();

    let from_files = dir.path().join("from_files.csv");
    let out = itrsurv(&[
        "generate",
        "--scenario-file",
        scenario_toml.to_str().unwrap(),
        "--covariates",
        covariates_toml.to_str().unwrap(),
        "--n",
        "150",
        "--seed",
        "3",
        "--out",
        from_files.to_str().unwrap(),
    ]);
    assert_success(&out);

    let builtin = dir.path().join("builtin.csv");
    let out = itrsurv(&[
        "generate",
        "--scenario",
        "2",
        "--n",
        "150",
        "--seed",
        "3",
        "--out",
        builtin.to_str().unwrap(),
    ]);
    assert_success(&out);
    assert_eq!(fs::read(&from_files).unwrap(), fs::read(&builtin).unwrap());
}

fn run_into(dir: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        "run",
        "--scenarios",
        "0",
        "--n",
        "120",
        "--replications",
        "2",
        "--methods",
        "v1,static_0,static_1",
        "--modes",
        "whole",
        "--oracle-draws",
        "2000",
        "--seed",
        "40",
        "--output",
    ];
    let output = dir.to_str().unwrap();
    args.push(output);
    args.extend_from_slice(extra);
    itrsurv(&args)
}

#[test]
fn run_is_deterministic_across_worker_counts_and_resumes() {
    let dir = tempfile::tempdir().unwrap();
    let one = dir.path().join("w1");
    let eight = dir.path().join("w8");
    assert_success(&run_into(&one, &["--workers", "1"]));
    assert_success(&run_into(&eight, &["--workers", "8"]));
    for file in ["replications.csv", "failures.csv", "summary.csv"] {
        assert_eq!(
            fs::read(one.join(file)).unwrap(),
            fs::read(eight.join(file)).unwrap(),
            "{file} differs between worker counts"
        );
    }

    // Crash resume: drop one fragment and the consolidated file, rerun.
    let reference = fs::read(one.join("replications.csv")).unwrap();
    fs::remove_file(one.join("fragments").join("s0_r000001.csv")).unwrap();
    fs::remove_file(one.join("replications.csv")).unwrap();
    let resumed = run_into(&one, &["--workers", "2"]);
    assert_success(&resumed);
    let stdout = String::from_utf8_lossy(&resumed.stdout);
    assert!(stdout.contains("ran 1 replication(s), skipped 1"), "stdout: {stdout}");
    assert_eq!(fs::read(one.join("replications.csv")).unwrap(), reference);
}

#[test]
fn run_merges_config_file_and_flag_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("experiment.toml");
    fs::write(
        &config,
        "scenarios = [0]\nn = 120\nreplications = 5\nmethods = [\"v1\"]\n\
         modes = [\"whole\"]\noracle_draws = 2000\nseed = 40\n",
    )
    .unwrap();
    let output = dir.path().join("out");
    let out = itrsurv(&[
        "run",
        "--config",
        config.to_str().unwrap(),
        "--replications",
        "1",
        "--output",
        output.to_str().unwrap(),
        "--workers",
        "1",
    ]);
    assert_success(&out);
    let rows = fs::read_to_string(output.join("replications.csv")).unwrap();
    // Flag override wins: one replication, one method row, plus header.
    assert_eq!(rows.lines().count(), 2);

    // The echoed config pins the merged experiment.
    let echo = fs::read_to_string(output.join("config.toml")).unwrap();
    assert!(echo.contains("replications = 1"), "echo: {echo}");
}

#[test]
fn run_rejects_bad_configuration_with_a_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    let out = itrsurv(&[
        "run",
        "--methods",
        "v1,cox_lassso",
        "--output",
        dir.path().to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("cox_lassso"), "stderr: {stderr}");

    let out = itrsurv(&["run", "--n", "50", "--output", dir.path().to_str().unwrap()]);
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("at least 100"), "stderr: {stderr}");
}

#[test]
fn summarize_prints_a_table_and_errors_cleanly_when_empty() {
    let dir = tempfile::tempdir().unwrap();
    let out = itrsurv(&["summarize", dir.path().to_str().unwrap()]);
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("no result rows"), "stderr: {stderr}");

    let run_dir = dir.path().join("run");
    assert_success(&run_into(&run_dir, &["--workers", "1"]));
    let out = itrsurv(&["summarize", run_dir.to_str().unwrap()]);
    assert_success(&out);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("metric_ii"), "stdout: {stdout}");
    assert!(stdout.contains("static_1"), "stdout: {stdout}");
}

#[test]
fn oracle_reports_scenario_zero_as_always_treat() {
    let out = itrsurv(&["oracle", "--scenarios", "0", "--draws", "20000"]);
    assert_success(&out);
    let stdout = String::from_utf8_lossy(&out.stdout);
    let row = stdout.lines().nth(1).expect("one scenario row");
    let fields: Vec<&str> = row.split_whitespace().collect();
    let regret_1: f64 = fields[5].parse().unwrap();
    assert_eq!(regret_1, 0.0, "row: {row}");
}
