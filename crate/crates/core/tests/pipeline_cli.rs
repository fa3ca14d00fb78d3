//! End-to-end tests of the config-driven pipeline and the `lvinv` binary:
//! artifact layout, exit codes, determinism, and error staging.

use std::path::{Path, PathBuf};
use std::process::Command;

use lvinv::error::LvError;
use lvinv::harness::{run_pipeline, RunConfig};

fn repo_config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name)
}

fn temp_dir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("lvinv_test_{tag}_{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

/// Small, fast variant of the bundled bazykin run for in-process tests.
fn small_bazykin_config() -> String {
    let text = std::fs::read_to_string(repo_config("bazykin_order2.cfg")).unwrap();
    text.replace("cells = 256", "cells = 96")
        .replace("steps = 2000", "steps = 400")
        .replace("modes = [0, 1, 2, 3, 4]", "modes = [0, 1, 2]")
}

#[test]
fn pipeline_meets_tolerances_and_writes_artifacts() {
    let cfg = RunConfig::from_str_named(&small_bazykin_config(), "small_bazykin").unwrap();
    let v = cfg.validate().unwrap();
    let out = temp_dir("pipeline");
    let outcome = run_pipeline(&v, &out).unwrap();
    assert!(outcome.tolerance_ok, "worst {:?}", outcome.max_scaled_error);
    assert!(outcome.max_scaled_error.unwrap() <= 5e-2);
    for name in [
        "recovery_report.csv",
        "recovery_plot.csv",
        "summary.txt",
        "forward_u.csv",
        "forward_v.csv",
        "variation_agreement.csv",
    ] {
        assert!(out.join(name).exists(), "missing {name}");
    }
    let report = std::fs::read_to_string(out.join("recovery_report.csv")).unwrap();
    let mut lines = report.lines();
    assert_eq!(
        lines.next().unwrap(),
        "order,target,m,n,estimate,truth,abs_error,residual,cond"
    );
    // six order-2 coefficients plus the first-order G_v row
    assert_eq!(report.lines().count(), 1 + 1 + 6);
    // plot error column equals |estimate - truth|
    let plot = std::fs::read_to_string(out.join("recovery_plot.csv")).unwrap();
    for line in plot.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        let est: f64 = cols[2].parse().unwrap();
        let truth: f64 = cols[3].parse().unwrap();
        let err: f64 = cols[4].parse().unwrap();
        assert!((err - (est - truth).abs()).abs() <= 1e-15 * err.abs().max(1.0));
    }
}

#[test]
fn pipeline_is_deterministic() {
    let cfg = RunConfig::from_str_named(&small_bazykin_config(), "small_bazykin").unwrap();
    let v = cfg.validate().unwrap();
    let out1 = temp_dir("det1");
    let out2 = temp_dir("det2");
    run_pipeline(&v, &out1).unwrap();
    run_pipeline(&v, &out2).unwrap();
    for name in ["recovery_report.csv", "recovery_plot.csv", "summary.txt"] {
        let a = std::fs::read(out1.join(name)).unwrap();
        let b = std::fs::read(out2.join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between identical runs");
    }
}

#[test]
fn oversized_epsilon_fails_in_the_assembly_stage() {
    // f = eps - 3 eps^2 goes negative once eps > 1/3; the data are fine at
    // first order, so only assembly can catch it
    let text = small_bazykin_config()
        .replace("eps = 0.01", "eps = 0.4")
        .replace("f1 = [1.0]\ng1 = [1.0]", "f1 = [1.0]\nf2 = [-3.0]\ng1 = [1.0]");
    let cfg = RunConfig::from_str_named(&text, "oversized").unwrap();
    let v = cfg.validate().unwrap();
    let out = temp_dir("oversized");
    match run_pipeline(&v, &out) {
        Err(e) => {
            assert_eq!(e.stage(), Some("variation/assemble_initial"), "{e}");
            assert!(
                matches!(unwrap_stage(&e), LvError::NegativeData { .. }),
                "expected NegativeData, got {e}"
            );
        }
        Ok(_) => panic!("oversized epsilon must fail"),
    }
}

fn unwrap_stage(e: &LvError) -> &LvError {
    match e {
        LvError::Stage { source, .. } => unwrap_stage(source),
        other => other,
    }
}

#[test]
fn truth_free_report_has_empty_truth_columns() {
    let text = small_bazykin_config().replace(
        "max_order = 2",
        "max_order = 2\nuse_truth = false",
    );
    let cfg = RunConfig::from_str_named(&text, "no_truth").unwrap();
    let v = cfg.validate().unwrap();
    let out = temp_dir("no_truth");
    let outcome = run_pipeline(&v, &out).unwrap();
    assert!(outcome.tolerance_ok);
    assert!(outcome.max_scaled_error.is_none());
    let report = std::fs::read_to_string(out.join("recovery_report.csv")).unwrap();
    for line in report.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        assert_eq!(cols[5], "", "truth column must be empty");
        assert_eq!(cols[6], "", "abs_error column must be empty");
        assert!(!cols[4].is_empty() && !cols[7].is_empty());
    }
}

fn lvinv_bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_lvinv"))
}

#[test]
fn cli_pipeline_exit_codes() {
    let out = temp_dir("cli_pipeline");
    let cfg_path = out.join("run.cfg");
    std::fs::write(&cfg_path, small_bazykin_config()).unwrap();
    let status = lvinv_bin()
        .args(["pipeline", "--config"])
        .arg(&cfg_path)
        .arg("--out")
        .arg(out.join("artifacts"))
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));

    // validation failure: unknown scheme
    let bad = small_bazykin_config().replace("backward_euler_imex", "exponential_fit");
    let bad_path = out.join("bad.cfg");
    std::fs::write(&bad_path, bad).unwrap();
    let status = lvinv_bin()
        .args(["pipeline", "--config"])
        .arg(&bad_path)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));

    // numerical failure: data negative once assembled
    let neg = small_bazykin_config()
        .replace("eps = 0.01", "eps = 0.4")
        .replace("f1 = [1.0]\ng1 = [1.0]", "f1 = [1.0]\nf2 = [-3.0]\ng1 = [1.0]");
    let neg_path = out.join("neg.cfg");
    std::fs::write(&neg_path, neg).unwrap();
    let status = lvinv_bin()
        .args(["pipeline", "--config"])
        .arg(&neg_path)
        .arg("--out")
        .arg(out.join("neg_artifacts"))
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(3));

    // tolerance failure: impossible accuracy demand
    let strict = small_bazykin_config().replace("max_abs_error = 5e-2", "max_abs_error = 1e-12");
    let strict_path = out.join("strict.cfg");
    std::fs::write(&strict_path, strict).unwrap();
    let status = lvinv_bin()
        .args(["pipeline", "--config"])
        .arg(&strict_path)
        .arg("--out")
        .arg(out.join("strict_artifacts"))
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(4));
}

#[test]
fn cli_forward_and_variation_and_recover() {
    let out = temp_dir("cli_all");
    let cfg_path = out.join("run.cfg");
    std::fs::write(&cfg_path, small_bazykin_config()).unwrap();

    let status = lvinv_bin()
        .args(["forward", "--config"])
        .arg(&cfg_path)
        .arg("--out")
        .arg(out.join("fwd"))
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    assert!(out.join("fwd/u.csv").exists());
    assert!(out.join("fwd/measurement_terminal.csv").exists());

    let status = lvinv_bin()
        .args(["variation", "--order", "2", "--mode", "both", "--config"])
        .arg(&cfg_path)
        .arg("--out")
        .arg(out.join("var"))
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    assert!(out.join("var/fd_u1.csv").exists());
    assert!(out.join("var/direct_u2.csv").exists());
    let agreement = std::fs::read_to_string(out.join("var/agreement.csv")).unwrap();
    for line in agreement.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        let du: f64 = cols[1].parse().unwrap();
        let dv: f64 = cols[2].parse().unwrap();
        assert!(du < 1e-2 && dv < 1e-2, "agreement too loose: {line}");
    }

    let status = lvinv_bin()
        .args(["recover", "--design"])
        .arg(&cfg_path)
        .args(["--max-order", "2", "--eps-ladder", "0.01,0.02,0.04", "--truth"])
        .arg(&cfg_path)
        .arg("--out")
        .arg(out.join("rec"))
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    let report = std::fs::read_to_string(out.join("rec/recovery_report.csv")).unwrap();
    assert!(report.lines().count() >= 7);
}

#[test]
fn cli_forward_direct_flags() {
    let out = temp_dir("cli_forward_flags");
    let status = lvinv_bin()
        .args([
            "forward",
            "--model",
            "bazykin",
            "--params",
            "a=1,K=2,b=1,A=1,c=0.5,d=1,h=0.2",
            "--L",
            "3.141592653589793",
            "--N",
            "64",
            "--T",
            "0.5",
            "--steps",
            "100",
            "--scheme",
            "crank_nicolson_imex",
        ])
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    assert!(out.join("v.csv").exists());
}

#[test]
fn bundled_configs_validate() {
    for name in [
        "bazykin_order2.cfg",
        "hydra_order3.cfg",
        "holling_tanner_relaxed.cfg",
    ] {
        let cfg = RunConfig::from_path(&repo_config(name)).unwrap();
        cfg.validate()
            .unwrap_or_else(|e| panic!("{name} failed validation: {e}"));
    }
}

#[test]
fn bundled_configs_finish_within_their_declared_budgets() {
    for name in [
        "bazykin_order2.cfg",
        "hydra_order3.cfg",
        "holling_tanner_relaxed.cfg",
    ] {
        let path = repo_config(name);
        let text = std::fs::read_to_string(&path).unwrap();
        let budget_line = text
            .lines()
            .find(|l| l.contains("Runtime budget:"))
            .unwrap_or_else(|| panic!("{name} must declare a runtime budget"));
        let budget_secs: f64 = budget_line
            .split("Runtime budget:")
            .nth(1)
            .unwrap()
            .trim()
            .split_whitespace()
            .next()
            .unwrap()
            .parse()
            .unwrap();

        let cfg = RunConfig::from_path(&path).unwrap();
        let v = cfg.validate().unwrap();
        let out = temp_dir(&format!("budget_{}", name.replace('.', "_")));
        let start = std::time::Instant::now();
        let outcome = run_pipeline(&v, &out).unwrap();
        let elapsed = start.elapsed().as_secs_f64();
        assert!(
            elapsed <= budget_secs,
            "{name} took {elapsed:.1} s, budget {budget_secs} s"
        );
        assert!(
            outcome.tolerance_ok,
            "{name} missed its tolerance: {:?}",
            outcome.max_scaled_error
        );
    }
}
