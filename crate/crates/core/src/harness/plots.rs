//! Plot-ready CSV tables; rendering is left to external tools.

use std::path::{Path, PathBuf};

use super::run::RunOutput;
use crate::error::{Error, Result};

/// Writes whichever of `variance.csv`, `tau_limit.csv` and `norm.csv` the run supports.
pub fn emit_plots(output: &RunOutput, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();

    let variance: Vec<_> = output
        .cells
        .iter()
        .filter_map(|c| {
            let v = c.metrics.get("variance.var_norm_sq")?;
            let se = c.metrics.get("variance.var_se")?;
            Some((c, *v, *se))
        })
        .collect();
    if !variance.is_empty() {
        let path = dir.join("variance.csv");
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(["n", "kappa", "tau", "var_mean", "var_se"])?;
        for (c, v, se) in variance {
            w.write_record([
                c.n.to_string(),
                c.kappa.to_string(),
                c.tau.to_string(),
                v.to_string(),
                se.to_string(),
            ])?;
        }
        w.flush()?;
        written.push(path);
    }

    if output.cells.iter().any(|c| !c.tau_path.is_empty()) {
        let path = dir.join("tau_limit.csv");
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(["kappa", "tau", "r", "c"])?;
        for c in &output.cells {
            for row in &c.tau_path {
                w.write_record([
                    c.kappa.to_string(),
                    row.tau.to_string(),
                    row.r.to_string(),
                    row.c.to_string(),
                ])?;
            }
        }
        w.flush()?;
        written.push(path);
    }

    let norms: Vec<_> = output
        .cells
        .iter()
        .filter_map(|c| {
            let values: Vec<f64> = output
                .records
                .iter()
                .filter(|r| r.cell == c.cell)
                .filter_map(|r| r.metrics.get("fit.beta_norm").copied())
                .collect();
            if values.is_empty() {
                return None;
            }
            let m = values.len() as f64;
            let mean = values.iter().sum::<f64>() / m;
            let se = if values.len() > 1 {
                (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0) / m).sqrt()
            } else {
                f64::NAN
            };
            Some((c, mean, se))
        })
        .collect();
    if !norms.is_empty() {
        let path = dir.join("norm.csv");
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(["n", "kappa", "tau", "beta_norm_mean", "beta_norm_se", "r_predicted"])?;
        for (c, mean, se) in norms {
            w.write_record([
                c.n.to_string(),
                c.kappa.to_string(),
                c.tau.to_string(),
                mean.to_string(),
                se.to_string(),
                c.prediction.as_ref().map_or_else(String::new, |p| p.r.to_string()),
            ])?;
        }
        w.flush()?;
        written.push(path);
    }

    if written.is_empty() {
        return Err(Error::EmptySelection("no plottable metrics in the run".into()));
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::{run, ExperimentConfig, RunOptions};

    #[test]
    fn empty_run_is_rejected() {
        let out = RunOutput {
            config_hash: String::new(),
            version: String::new(),
            records: Vec::new(),
            cells: Vec::new(),
            passed: true,
        };
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(emit_plots(&out, dir.path()), Err(Error::EmptySelection(_))));
    }

    #[test]
    fn variance_and_tau_tables() {
        let text = r#"
loss = { name = "quadratic" }
noise = { name = "gaussian", sd = 1.0 }
seeds = [0, 1, 2, 3, 4, 5, 6, 7, 8, 9]
checks = ["variance", "tau_limit"]
settings = { tau_grid = [0.5, 0.1, 0.05], tau_fit_grid = [0.1] }

[grid]
n = [20, 40]
kappa = [0.5]
tau = [1.0]
"#;
        let out = run(&ExperimentConfig::parse(text).unwrap(), &RunOptions::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let files = emit_plots(&out, dir.path()).unwrap();
        let names: Vec<_> = files
            .iter()
            .map(|p| p.file_name().unwrap().to_str().unwrap().to_string())
            .collect();
        assert_eq!(names, ["variance.csv", "tau_limit.csv", "norm.csv"]);
        let var = std::fs::read_to_string(dir.path().join("variance.csv")).unwrap();
        assert!(var.starts_with("n,kappa,tau,var_mean,var_se"));
        assert_eq!(var.lines().count(), 3);
        let tau = std::fs::read_to_string(dir.path().join("tau_limit.csv")).unwrap();
        assert_eq!(tau.lines().count(), 1 + 2 * 3);
        assert!(out.cells[1].metrics.contains_key("variance.ratio_from_smallest_n"));
    }
}
