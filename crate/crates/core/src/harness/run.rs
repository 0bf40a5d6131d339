//! Executes a configuration: one record per `(cell, seed)` plus per-cell aggregates.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{Check, ExperimentConfig, ResolvedCell};
use crate::diagnostics::{
    c_tau_concentration, loo_indices, loo_report_with, lop_report, residual_law_check, second_moment_identity,
    summarize_loo, sweep::variance_with_se, LooOptions,
};
use crate::error::{Error, Result};
use crate::estimator::{fit, fit_bounds, gen_design_in_cell, optimality_transfer, tau_limit_bound, FitResult};
use crate::fixed_point::{solve_system, solve_tau_limit, SystemSolution, TauLimit};
use crate::losses::LossModel;
use crate::rng::stream;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Recorded alongside metrics: every reduction runs in a fixed order.
pub const REDUCTION_MODE: &str = "ordered";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub cell: usize,
    pub n: usize,
    pub p: usize,
    pub kappa: f64,
    pub tau: f64,
    pub seed: u64,
    pub metrics: BTreeMap<String, f64>,
    pub failures: Vec<String>,
    pub error: Option<String>,
    pub passed: bool,
    pub wall_clock_s: f64,
    pub version: String,
    pub reduction: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TauRow {
    pub tau: f64,
    pub r: f64,
    pub c: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub cell: usize,
    pub n: usize,
    pub p: usize,
    pub kappa: f64,
    pub tau: f64,
    pub seeds: usize,
    pub prediction: Option<SystemSolution>,
    pub metrics: BTreeMap<String, f64>,
    pub tau_path: Vec<TauRow>,
    pub failures: Vec<String>,
    pub errors: Vec<String>,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutput {
    pub config_hash: String,
    pub version: String,
    pub records: Vec<RunRecord>,
    pub cells: Vec<CellSummary>,
    pub passed: bool,
}

impl RunOutput {
    pub fn failures(&self) -> Vec<String> {
        let mut out = Vec::new();
        for r in &self.records {
            let tag = format!("cell {} seed {}", r.cell, r.seed);
            out.extend(r.failures.iter().map(|f| format!("{tag}: {f}")));
            if let Some(e) = &r.error {
                out.push(format!("{tag}: error: {e}"));
            }
        }
        for c in &self.cells {
            let tag = format!("cell {}", c.cell);
            out.extend(c.failures.iter().map(|f| format!("{tag}: {f}")));
            out.extend(c.errors.iter().map(|e| format!("{tag}: error: {e}")));
        }
        out
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Worker threads; `None` uses all cores.
    pub jobs: Option<usize>,
    /// Replaces the configured seed list with `0..count` offset by this base.
    pub seed_base: Option<u64>,
}

struct Job<'a> {
    cell: ResolvedCell,
    seed: u64,
    prediction: Option<&'a SystemSolution>,
}

struct Recorder {
    metrics: BTreeMap<String, f64>,
    failures: Vec<String>,
}

impl Recorder {
    fn new() -> Self {
        Recorder {
            metrics: BTreeMap::new(),
            failures: Vec::new(),
        }
    }

    fn put(&mut self, key: &str, value: f64) {
        self.metrics.insert(key.to_string(), value);
    }

    fn require(&mut self, ok: bool, what: impl FnOnce() -> String) {
        if !ok {
            self.failures.push(what());
        }
    }
}

pub fn run(config: &ExperimentConfig, opts: &RunOptions) -> Result<RunOutput> {
    let mut config = config.clone();
    if let Some(base) = opts.seed_base {
        let count = config.seeds.len() as u64;
        config.seeds = (base..base + count).collect();
    }
    let cells = config.validate()?;
    let hash = config.hash();
    with_jobs(opts.jobs, || execute(&config, &cells, &hash))?
}

/// Runs `f` on a worker pool of `jobs` threads (all cores when `None`).
pub fn with_jobs<T: Send>(jobs: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(j) = jobs {
        builder = builder.num_threads(j.max(1));
    }
    let pool = builder
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

fn execute(config: &ExperimentConfig, cells: &[ResolvedCell], hash: &str) -> Result<RunOutput> {
    let needs_prediction = [Check::System, Check::ResidualLaw, Check::Ctau]
        .iter()
        .any(|c| config.has(*c));
    let predictions: Vec<std::result::Result<SystemSolution, String>> = cells
        .par_iter()
        .map(|c| {
            if needs_prediction {
                solve_system(c.kappa, c.tau, &config.loss, &config.noise).map_err(|e| e.to_string())
            } else {
                Err("not requested".into())
            }
        })
        .collect();
    let jobs: Vec<Job> = cells
        .iter()
        .zip(&predictions)
        .flat_map(|(cell, pred)| {
            config.seeds.iter().map(move |&seed| Job {
                cell: *cell,
                seed,
                prediction: pred.as_ref().ok(),
            })
        })
        .collect();
    let results: Vec<(RunRecord, Option<FitResult>)> = jobs.par_iter().map(|job| run_job(config, job, hash)).collect();

    let per_cell = config.seeds.len();
    let mut summaries: Vec<CellSummary> = cells
        .par_iter()
        .zip(predictions.par_iter())
        .enumerate()
        .map(|(k, (cell, pred))| {
            let fits: Vec<&FitResult> = results[k * per_cell..(k + 1) * per_cell]
                .iter()
                .filter_map(|(_, f)| f.as_ref())
                .collect();
            summarize_cell(config, cell, pred, &fits)
        })
        .collect();
    variance_ratios(config, &mut summaries);

    let records: Vec<RunRecord> = results.into_iter().map(|(r, _)| r).collect();
    let passed = records.iter().all(|r| r.passed) && summaries.iter().all(|c| c.passed);
    Ok(RunOutput {
        config_hash: hash.to_string(),
        version: VERSION.to_string(),
        records,
        cells: summaries,
        passed,
    })
}

fn run_job(config: &ExperimentConfig, job: &Job, hash: &str) -> (RunRecord, Option<FitResult>) {
    let start = Instant::now();
    let mut rec = Recorder::new();
    let outcome = seed_checks(config, job, &mut rec);
    let (error, fit) = match outcome {
        Ok(f) => (None, f),
        Err(e) => (Some(e.to_string()), None),
    };
    let record = RunRecord {
        config_hash: hash.to_string(),
        cell: job.cell.index,
        n: job.cell.n,
        p: job.cell.p,
        kappa: job.cell.kappa,
        tau: job.cell.tau,
        seed: job.seed,
        passed: error.is_none() && rec.failures.is_empty(),
        metrics: rec.metrics,
        failures: rec.failures,
        error,
        wall_clock_s: start.elapsed().as_secs_f64(),
        version: VERSION.to_string(),
        reduction: REDUCTION_MODE.to_string(),
    };
    (record, fit)
}

fn seed_checks(config: &ExperimentConfig, job: &Job, rec: &mut Recorder) -> Result<Option<FitResult>> {
    let ResolvedCell { index, n, p, tau, .. } = job.cell;
    let loss = &config.loss;
    let tol = &config.tolerances;
    let quadratic = matches!(loss, LossModel::Quadratic);
    let design = gen_design_in_cell(n, p, config.entry_law, &config.noise, job.seed, index as u64)?;

    if let (true, Some(pred)) = (config.has(Check::System), job.prediction) {
        rec.put("system.r", pred.r);
        rec.put("system.c", pred.c);
        rec.require(pred.eq1_residual.abs() <= 1e-9, || {
            format!("system: eq1 residual {}", pred.eq1_residual)
        });
        rec.require(pred.eq2_residual.abs() <= 1e-9 * (1.0 + pred.r * pred.r), || {
            format!("system: eq2 residual {}", pred.eq2_residual)
        });
        rec.require(pred.c <= pred.kappa / pred.tau, || {
            format!("system: c = {} > kappa/tau", pred.c)
        });
    }

    let full = if config.checks.iter().any(|c| c.needs_fit()) {
        let f = fit(&design, loss, tau)?;
        rec.put("fit.beta_norm", f.beta_norm());
        rec.put("fit.c_tau", f.c_tau);
        rec.put("fit.grad_norm", f.grad_norm);
        rec.put("fit.iterations", f.iterations as f64);
        Some(f)
    } else {
        None
    };

    if let (true, Some(f)) = (config.has(Check::FitBounds), &full) {
        let b = fit_bounds(&design, loss, f);
        rec.put("fit_bounds.wn_bound", b.wn_bound);
        rec.put("fit_bounds.rho_bound", b.rho_bound);
        for v in &b.violations {
            rec.failures.push(format!("fit_bounds: {v}"));
        }
        let mut rng = stream(job.seed, index as u64, "transfer");
        let t = optimality_transfer(&design, loss, f, &mut rng, config.settings.transfer_probes);
        rec.put("fit_bounds.transfer_ratio", t.max_ratio);
        rec.require(t.max_ratio <= 1.0 + 1e-9, || {
            format!("fit_bounds: transfer ratio {}", t.max_ratio)
        });
        if let Some(s) = t.max_ratio_strong {
            rec.put("fit_bounds.transfer_ratio_strong", s);
            rec.require(s <= 1.0 + 1e-9, || format!("fit_bounds: strong transfer ratio {s}"));
        }
    }

    if let (true, Some(f)) = (config.has(Check::Loo), &full) {
        let count = if config.settings.loo_all {
            n
        } else {
            config.settings.loo_count
        };
        let idx = loo_indices(n, count, job.seed, index as u64);
        let opts = LooOptions {
            warm_start: config.settings.warm_start,
            ..LooOptions::default()
        };
        let s = summarize_loo(&loo_report_with(&design, loss, tau, f, &idx, &opts)?, f.c_tau);
        rec.put("loo.median_err_beta", s.median_err_beta);
        rec.put("loo.max_err_beta", s.max_err_beta);
        rec.put("loo.median_err_resid", s.median_err_resid);
        rec.put("loo.max_err_resid", s.max_err_resid);
        rec.put("loo.sup_c_deviation", s.sup_c_deviation);
        if quadratic {
            rec.require(s.max_err_beta.max(s.max_err_resid) <= tol.quadratic_exact, || {
                format!("loo: quadratic identity off by {}", s.max_err_beta.max(s.max_err_resid))
            });
        }
    }

    if let (true, Some(f)) = (config.has(Check::Lop), &full) {
        let r = lop_report(&design, loss, tau, f)?;
        let s = r.summary(f);
        rec.put("lop.xi_n", s.xi_n);
        rec.put("lop.b_frak", s.b_frak);
        rec.put("lop.err_last_coord", s.err_last_coord);
        rec.put("lop.err_vector", s.err_vector);
        rec.put("lop.err_resid_sup", s.err_resid_sup);
        rec.put("lop.trace_error", s.trace_error);
        rec.put("lop.max_eta", s.max_eta);
        rec.require(s.xi_n >= 0.0, || format!("lop: xi_n = {}", s.xi_n));
        rec.require(s.trace_error <= tol.trace_identity, || {
            format!("lop: trace identity off by {}", s.trace_error)
        });
        rec.require(s.z_norm_sq <= s.z_norm_bound * (1.0 + 1e-12), || {
            format!("lop: |z|^2 = {} > {}", s.z_norm_sq, s.z_norm_bound)
        });
        if quadratic {
            rec.require(s.err_vector <= tol.quadratic_exact, || {
                format!("lop: quadratic identity off by {}", s.err_vector)
            });
        }
    }

    if config.has(Check::TauLimit) {
        let rows = tau_limit_bound(&design, loss, &config.settings.tau_fit_grid)?;
        let worst = rows.iter().map(|r| r.distance / r.bound).fold(0.0, f64::max);
        rec.put("tau_limit.max_bound_ratio", worst);
        rec.require(worst <= 1.0, || format!("tau_limit: distance/bound = {worst}"));
    }
    Ok(full)
}

fn summarize_cell(
    config: &ExperimentConfig,
    cell: &ResolvedCell,
    pred: &std::result::Result<SystemSolution, String>,
    fits: &[&FitResult],
) -> CellSummary {
    let tol = &config.tolerances;
    let mut rec = Recorder::new();
    let mut errors = Vec::new();
    let mut tau_path = Vec::new();
    let owned: Vec<FitResult> = fits.iter().map(|f| (*f).clone()).collect();
    let complete = fits.len() == config.seeds.len();

    let needs_prediction = [Check::System, Check::ResidualLaw, Check::Ctau]
        .iter()
        .any(|c| config.has(*c));
    if let (true, Err(e)) = (needs_prediction, pred) {
        errors.push(format!("system: {e}"));
    }
    if !complete && config.checks.iter().any(|c| c.needs_fit()) {
        errors.push(format!(
            "{} of {} fits failed",
            config.seeds.len() - fits.len(),
            config.seeds.len()
        ));
    }

    if let Ok(pred) = pred {
        if config.has(Check::System) && !owned.is_empty() {
            let mean = owned.iter().map(|f| f.beta_norm()).sum::<f64>() / owned.len() as f64;
            let gap = (mean - pred.r).abs() / pred.r;
            rec.put("system.mean_beta_norm", mean);
            rec.put("system.norm_rel_gap", gap);
            rec.require(gap <= tol.norm_rel, || {
                format!("system: mean |beta| off r by {gap:.4} relative")
            });
            let sm = second_moment_identity(&owned, &config.loss);
            rec.put("system.second_moment_lhs", sm.lhs);
            rec.put("system.second_moment_rhs", sm.rhs);
            rec.put("system.second_moment_rel_gap", sm.rel_gap);
            rec.require(sm.rel_gap <= tol.second_moment_rel, || {
                format!("system: second-moment identity off by {:.4} relative", sm.rel_gap)
            });
        }
        if config.has(Check::ResidualLaw) && !owned.is_empty() {
            match residual_law_check(&owned, pred, &config.loss, &config.noise) {
                Ok(l) => {
                    rec.put("residual_law.ks", l.ks);
                    rec.put("residual_law.critical_95", l.critical_95);
                    rec.put("residual_law.mean_abs_observed", l.mean_abs_observed);
                    rec.put("residual_law.mean_abs_predicted", l.mean_abs_predicted);
                    rec.require(l.ks <= tol.ks, || format!("residual_law: KS = {:.4}", l.ks));
                }
                Err(e) => errors.push(format!("residual_law: {e}")),
            }
        }
        if config.has(Check::Ctau) && !owned.is_empty() {
            let s = c_tau_concentration(&owned, pred);
            rec.put("ctau.mean", s.mean);
            rec.put("ctau.sd", s.sd);
            rec.put("ctau.rel_err", s.rel_err);
            rec.put("ctau.rel_sd", s.rel_sd);
            rec.require(s.rel_err <= tol.ctau_rel, || {
                format!("ctau: mean off c by {:.4} relative", s.rel_err)
            });
        }
    }

    if config.has(Check::Variance) && complete {
        let norms: Vec<f64> = owned.iter().map(|f| f.beta_hat.norm_squared()).collect();
        let (mean, var, se) = variance_with_se(&norms);
        rec.put("variance.mean_norm_sq", mean);
        rec.put("variance.var_norm_sq", var);
        rec.put("variance.var_se", se);
    }

    if config.has(Check::TauLimit) {
        match solve_tau_limit(cell.kappa, &config.loss, &config.noise, &config.settings.tau_grid) {
            Ok(lim) => tau_limit_metrics(config, cell, &lim, &mut rec, &mut tau_path),
            Err(e) => errors.push(format!("tau_limit: {e}")),
        }
    }

    CellSummary {
        cell: cell.index,
        n: cell.n,
        p: cell.p,
        kappa: cell.kappa,
        tau: cell.tau,
        seeds: config.seeds.len(),
        prediction: pred.as_ref().ok().cloned(),
        passed: rec.failures.is_empty() && errors.is_empty(),
        metrics: rec.metrics,
        tau_path,
        failures: rec.failures,
        errors,
    }
}

fn tau_limit_metrics(
    config: &ExperimentConfig,
    cell: &ResolvedCell,
    lim: &TauLimit,
    rec: &mut Recorder,
    path: &mut Vec<TauRow>,
) {
    path.extend(lim.table.iter().map(|s| TauRow {
        tau: s.tau,
        r: s.r,
        c: s.c,
    }));
    rec.put("tau_limit.r0", lim.r0);
    rec.put("tau_limit.c0", lim.c0);
    rec.put("tau_limit.r_monotone", if lim.r_monotone { 1.0 } else { 0.0 });
    if matches!(config.loss, LossModel::Quadratic) {
        let target = cell.kappa * config.noise.variance() / (1.0 - cell.kappa);
        let gap = (lim.r0 * lim.r0 - target).abs() / target;
        rec.put("tau_limit.ridgeless_rel_gap", gap);
        rec.require(gap <= config.tolerances.tau_limit_rel, || {
            format!("tau_limit: r0^2 off the ridgeless value by {gap:.4} relative")
        });
    }
}

/// Ratio of `var(|beta|^2)` at the smallest `n` to each larger `n` with the same `(kappa, tau)`.
fn variance_ratios(config: &ExperimentConfig, cells: &mut [CellSummary]) {
    if !config.has(Check::Variance) {
        return;
    }
    let var_of = |c: &CellSummary| c.metrics.get("variance.var_norm_sq").copied();
    let snapshot: Vec<(usize, f64, f64, Option<f64>)> =
        cells.iter().map(|c| (c.n, c.kappa, c.tau, var_of(c))).collect();
    for cell in cells.iter_mut() {
        let base = snapshot
            .iter()
            .filter(|(n, k, t, v)| *k == cell.kappa && *t == cell.tau && *n < cell.n && v.is_some())
            .min_by_key(|(n, ..)| *n);
        if let (Some(&(n0, _, _, Some(v0))), Some(v)) = (base, var_of(cell)) {
            let ratio = v0 / v;
            cell.metrics.insert("variance.ratio_from_smallest_n".into(), ratio);
            cell.metrics.insert("variance.smallest_n".into(), n0 as f64);
            if let Some(min) = config.tolerances.variance_ratio_min {
                if ratio < min {
                    cell.failures.push(format!(
                        "variance: var(n={n0}) / var(n={}) = {ratio:.3} < {min}",
                        cell.n
                    ));
                    cell.passed = false;
                }
            }
        }
    }
}

/// Writes `records.csv`, `cells.csv` and `run.json` under `dir`.
pub fn write_outputs(output: &RunOutput, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();

    let keys: Vec<String> = {
        let mut k: Vec<String> = output.records.iter().flat_map(|r| r.metrics.keys().cloned()).collect();
        k.sort();
        k.dedup();
        k
    };
    let path = dir.join("records.csv");
    let mut w = csv::Writer::from_path(&path)?;
    let mut header = vec![
        "config_hash",
        "cell",
        "n",
        "p",
        "kappa",
        "tau",
        "seed",
        "passed",
        "error",
        "wall_clock_s",
    ]
    .into_iter()
    .map(String::from)
    .collect::<Vec<_>>();
    header.extend(keys.iter().cloned());
    w.write_record(&header)?;
    for r in &output.records {
        let mut row = vec![
            r.config_hash.clone(),
            r.cell.to_string(),
            r.n.to_string(),
            r.p.to_string(),
            r.kappa.to_string(),
            r.tau.to_string(),
            r.seed.to_string(),
            r.passed.to_string(),
            r.error.clone().unwrap_or_default(),
            format!("{:.6}", r.wall_clock_s),
        ];
        row.extend(
            keys.iter()
                .map(|k| r.metrics.get(k).map_or_else(String::new, |v| v.to_string())),
        );
        w.write_record(&row)?;
    }
    w.flush()?;
    written.push(path);

    let keys: Vec<String> = {
        let mut k: Vec<String> = output.cells.iter().flat_map(|c| c.metrics.keys().cloned()).collect();
        k.sort();
        k.dedup();
        k
    };
    let path = dir.join("cells.csv");
    let mut w = csv::Writer::from_path(&path)?;
    let mut header = vec!["cell", "n", "p", "kappa", "tau", "seeds", "passed", "r", "c"]
        .into_iter()
        .map(String::from)
        .collect::<Vec<_>>();
    header.extend(keys.iter().cloned());
    w.write_record(&header)?;
    for c in &output.cells {
        let mut row = vec![
            c.cell.to_string(),
            c.n.to_string(),
            c.p.to_string(),
            c.kappa.to_string(),
            c.tau.to_string(),
            c.seeds.to_string(),
            c.passed.to_string(),
            c.prediction.as_ref().map_or_else(String::new, |s| s.r.to_string()),
            c.prediction.as_ref().map_or_else(String::new, |s| s.c.to_string()),
        ];
        row.extend(
            keys.iter()
                .map(|k| c.metrics.get(k).map_or_else(String::new, |v| v.to_string())),
        );
        w.write_record(&row)?;
    }
    w.flush()?;
    written.push(path);

    let path = dir.join("run.json");
    fs::write(&path, serde_json::to_string_pretty(output)?)?;
    written.push(path);
    Ok(written)
}
