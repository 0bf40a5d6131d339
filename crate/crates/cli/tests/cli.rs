use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn proxasym(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_proxasym"))
        .args(args)
        .output()
        .expect("spawn proxasym")
}

fn json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| {
        panic!(
            "bad JSON ({e}): {}\nstderr: {}",
            String::from_utf8_lossy(&out.stdout),
            String::from_utf8_lossy(&out.stderr)
        )
    })
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("config.toml");
    std::fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn solve_quadratic_closed_form() {
    let out = proxasym(&[
        "solve",
        "--kappa",
        "0.3",
        "--tau",
        "0.5",
        "--loss",
        "quadratic",
        "--noise",
        "{ name = \"gaussian\", sd = 2.0 }",
    ]);
    assert_eq!(out.status.code(), Some(0));
    let v = json(&out);
    let (kappa, tau, sigma) = (0.3f64, 0.5f64, 2.0f64);
    let b = 1.0 - kappa + tau;
    let c = (-b + (b * b + 4.0 * tau * kappa).sqrt()) / (2.0 * tau);
    let a = (c / (1.0 + c)).powi(2);
    let r = (a * sigma * sigma / (kappa - a)).sqrt();
    assert!((v["c"].as_f64().unwrap() - c).abs() < 1e-10);
    assert!((v["r"].as_f64().unwrap() - r).abs() < 1e-10);
    assert_eq!(v["passed"], Value::Bool(true));
}

#[test]
fn solve_writes_out_file_and_tau_limit() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("nested/solve.json");
    let out = proxasym(&[
        "solve",
        "--loss",
        "smoothed_huber_ridge",
        "--tau-limit",
        "--out",
        path.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0));
    let saved: Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(saved, json(&out));
    assert!(saved["tau_limit"]["r0"].as_f64().unwrap() > saved["r"].as_f64().unwrap());
}

#[test]
fn fit_dump_and_seed() {
    let args = ["--seed", "7", "fit", "--n", "60", "--p", "20", "--tau", "0.5", "--dump"];
    let a = json(&proxasym(&args));
    let b = json(&proxasym(&args));
    assert_eq!(a, b);
    assert_eq!(a["beta_hat"].as_array().unwrap().len(), 20);
    assert_eq!(a["residuals"].as_array().unwrap().len(), 60);
    assert_eq!(a["violations"].as_array().unwrap().len(), 0);
    let other = json(&proxasym(&[
        "--seed", "8", "fit", "--n", "60", "--p", "20", "--tau", "0.5",
    ]));
    assert_ne!(a["beta_norm"], other["beta_norm"]);
}

#[test]
fn loo_quadratic_rows_and_exactness() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let out = proxasym(&[
        "--out-dir",
        d,
        "loo",
        "--n",
        "80",
        "--loss",
        "quadratic",
        "--seeds",
        "3",
        "--count",
        "4",
    ]);
    assert_eq!(out.status.code(), Some(0));
    let v = json(&out);
    assert!(v["pooled_max_err_beta"].as_f64().unwrap() < 1e-8);
    let csv = std::fs::read_to_string(dir.path().join("loo.csv")).unwrap();
    assert!(csv.starts_with("seed,index,r_tilde,c_i,err_beta,err_resid,refit_grad_norm"));
    assert_eq!(csv.lines().count(), 1 + 3 * 4);
    assert!(dir.path().join("loo.json").exists());
}

#[test]
fn lop_reports_per_seed_records() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let out = proxasym(&["--out-dir", d, "--jobs", "1", "lop", "--n", "60", "--seeds", "2"]);
    assert_eq!(out.status.code(), Some(0));
    let records = std::fs::read_to_string(dir.path().join("records.csv")).unwrap();
    assert_eq!(records.lines().count(), 3);
    assert!(records.lines().next().unwrap().contains("lop.trace_error"));
    let single = proxasym(&["lop", "--n", "10", "--p", "1"]);
    assert_eq!(single.status.code(), Some(2));
}

#[test]
fn verify_passes_at_moderate_n() {
    let out = proxasym(&["verify", "--n", "400", "--seeds", "10"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    let v = json(&out);
    assert_eq!(v["records"], 10);
    assert!(v["cells"][0]["metrics"]["residual_law.ks"].as_f64().unwrap() < 0.04);
}

#[test]
fn sweep_exit_code_follows_declared_ratio() {
    let base = ["sweep", "--loss", "quadratic", "--n", "50,200", "--seeds", "10"];
    let lax = proxasym(&[&base[..], &["--min-ratio", "0.01"]].concat());
    assert_eq!(lax.status.code(), Some(0));
    let strict = proxasym(&[&base[..], &["--min-ratio", "1000"]].concat());
    assert_eq!(strict.status.code(), Some(1));
    assert_eq!(json(&strict)["passed"], Value::Bool(false));
    let few = proxasym(&["sweep", "--seeds", "3"]);
    assert_eq!(few.status.code(), Some(2));
}

#[test]
fn run_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        r#"
loss = { name = "quadratic" }
noise = "gaussian"
seeds = [0, 1, 2, 3, 4, 5, 6, 7, 8, 9]
checks = ["system", "fit_bounds", "variance", "tau_limit"]

[grid]
n = [40, 80]
kappa = [0.5]
tau = [1.0]

[tolerances]
norm_rel = 0.5
second_moment_rel = 0.5
"#,
    );
    let out_dir = dir.path().join("out");
    let out = proxasym(&["--config", &config, "--out-dir", out_dir.to_str().unwrap(), "run"]);
    assert_eq!(
        out.status.code(),
        Some(2),
        "bare-name noise is not part of the config format"
    );

    let config = write_config(
        dir.path(),
        &std::fs::read_to_string(&config)
            .unwrap()
            .replace("noise = \"gaussian\"", "noise = { name = \"gaussian\", sd = 1.0 }"),
    );
    let out = proxasym(&["--config", &config, "--out-dir", out_dir.to_str().unwrap(), "run"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    assert_eq!(json(&out)["records"], 20);
    for f in [
        "records.csv",
        "cells.csv",
        "run.json",
        "variance.csv",
        "tau_limit.csv",
        "norm.csv",
    ] {
        assert!(out_dir.join(f).exists(), "{f} missing");
    }
}

#[test]
fn errors_exit_with_two() {
    let out = proxasym(&["fit", "--loss", "cauchy"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown loss `cauchy`"));
    assert_eq!(proxasym(&["run"]).status.code(), Some(2));

    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        "loss = { name = \"quadratic\" }\nnoise = { name = \"gaussian\", sd = 1.0 }\nseeds = [1]\nchecks = [\"fit_bounds\"]\n\
         [[cells]]\nn = 10\nkappa = 0.01\ntau = 1.0\n",
    );
    let out = proxasym(&["--config", &config, "run"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("cells[0]"));
}
