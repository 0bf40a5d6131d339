use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;

use proxasym::diagnostics::{loo_indices, loo_report_with, predictors, summarize_loo, LooOptions, LooRow, LooSummary};
use proxasym::estimator::{fit_bounds, gen_design_in_cell, FitSummary};
use proxasym::fixed_point::{solve_system_with, solve_tau_limit, SolverOptions, TauLimit};
use proxasym::harness::{
    emit_plots, run, with_jobs, write_outputs, Cell, Check, ExperimentConfig, Output, RunOptions, RunOutput, Settings,
    Tolerances,
};
use proxasym::{fit, EntryLaw, Error, LossModel, NoiseModel};

use crate::{CellArgs, Cli, Command, ModelArgs};

const DEFAULT_N: usize = 400;
const DEFAULT_KAPPA: f64 = 0.5;
const DEFAULT_TAU: f64 = 1.0;

struct Ctx {
    base: Option<ExperimentConfig>,
    seed: Option<u64>,
    jobs: Option<usize>,
    out_dir: Option<PathBuf>,
}

struct Models {
    loss: LossModel,
    noise: NoiseModel,
    entry_law: EntryLaw,
}

#[derive(Debug, Clone, Copy)]
struct Shape {
    n: usize,
    p: usize,
    kappa: f64,
    tau: f64,
}

impl Ctx {
    fn models(&self, args: &ModelArgs) -> Result<Models> {
        let loss = match (&args.loss, &self.base) {
            (Some(text), _) => text.parse().context("--loss")?,
            (None, Some(c)) => c.loss,
            (None, None) => LossModel::smoothed_huber(1.345),
        };
        let noise = match (&args.noise, &self.base) {
            (Some(text), _) => text.parse().context("--noise")?,
            (None, Some(c)) => c.noise.clone(),
            (None, None) => NoiseModel::gaussian(1.0),
        };
        let entry_law = match (&args.entry_law, &self.base) {
            (Some(text), _) => text.parse().context("--entry-law")?,
            (None, Some(c)) => c.entry_law,
            (None, None) => EntryLaw::Gaussian,
        };
        Ok(Models { loss, noise, entry_law })
    }

    fn settings(&self) -> Settings {
        self.base.as_ref().map(|c| c.settings.clone()).unwrap_or_default()
    }

    fn tolerances(&self) -> Tolerances {
        self.base.as_ref().map(|c| c.tolerances.clone()).unwrap_or_default()
    }

    fn first_cell(&self) -> Option<Cell> {
        self.base.as_ref().and_then(|c| c.all_cells().first().copied())
    }

    fn kappa_tau(&self, kappa: Option<f64>, tau: Option<f64>) -> (f64, f64) {
        let cell = self.first_cell();
        (
            kappa.or(cell.map(|c| c.kappa)).unwrap_or(DEFAULT_KAPPA),
            tau.or(cell.map(|c| c.tau)).unwrap_or(DEFAULT_TAU),
        )
    }

    fn shape(&self, args: &CellArgs) -> Result<Shape> {
        let n = args.n.or(self.first_cell().map(|c| c.n)).unwrap_or(DEFAULT_N);
        let (kappa, tau) = self.kappa_tau(args.kappa, args.tau);
        let (p, kappa) = match args.p {
            Some(p) => (p, p as f64 / n as f64),
            None => (predictors(n, kappa)?, kappa),
        };
        if n == 0 || p == 0 {
            bail!("need n >= 1 and p >= 1, got n = {n}, p = {p}");
        }
        Ok(Shape { n, p, kappa, tau })
    }

    /// `count` consecutive seeds from the base seed, or the config's list.
    fn seeds(&self, count: Option<usize>, default: usize) -> Vec<u64> {
        let base = self.seed.unwrap_or(0);
        match (count, &self.base) {
            (Some(k), _) => (base..base + k as u64).collect(),
            (None, Some(c)) if self.seed.is_none() => c.seeds.clone(),
            (None, Some(c)) => (base..base + c.seeds.len() as u64).collect(),
            (None, None) => (base..base + default as u64).collect(),
        }
    }

    fn harness_config(
        &self,
        models: Models,
        seeds: Vec<u64>,
        checks: Vec<Check>,
        cells: Vec<Cell>,
    ) -> ExperimentConfig {
        let (tolerances, settings) = (self.tolerances(), self.settings());
        ExperimentConfig {
            loss: models.loss,
            noise: models.noise,
            entry_law: models.entry_law,
            seeds,
            checks,
            cells,
            grid: None,
            tolerances,
            settings,
            output: Output::default(),
        }
    }

    fn write(&self, name: &str, text: &str) -> Result<()> {
        if let Some(dir) = &self.out_dir {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            let path = dir.join(name);
            fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        }
        Ok(())
    }
}

fn print_json<T: Serialize>(value: &T) -> Result<String> {
    let text = serde_json::to_string_pretty(value)?;
    // A closed pipe (e.g. `| head`) is not an error.
    match writeln!(std::io::stdout().lock(), "{text}") {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => return Err(e.into()),
        _ => {}
    }
    Ok(text)
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Returns whether every declared tolerance held.
pub fn dispatch(cli: Cli) -> Result<bool> {
    let base = cli.config.as_deref().map(ExperimentConfig::load).transpose()?;
    let ctx = Ctx {
        base,
        seed: cli.seed,
        jobs: cli.jobs,
        out_dir: cli.out_dir,
    };
    match cli.command {
        Command::Solve {
            kappa,
            tau,
            model,
            tau_limit,
            out,
        } => solve(&ctx, kappa, tau, &model, tau_limit, out.as_deref()),
        Command::Fit { cell, model, out, dump } => fit_once(&ctx, &cell, &model, out.as_deref(), dump),
        Command::Loo {
            cell,
            model,
            seeds,
            count,
            all,
            cold,
        } => loo(&ctx, &cell, &model, seeds, count, all, cold),
        Command::Lop { cell, model, seeds } => {
            let shape = ctx.shape(&cell)?;
            if shape.p < 2 {
                bail!("leave-one-predictor-out needs p >= 2");
            }
            harness_cell(&ctx, &model, shape, ctx.seeds(seeds, 1), vec![Check::Lop])
        }
        Command::Verify { cell, model, seeds } => {
            let checks = vec![Check::System, Check::FitBounds, Check::ResidualLaw, Check::Ctau];
            harness_cell(&ctx, &model, ctx.shape(&cell)?, ctx.seeds(seeds, 20), checks)
        }
        Command::Sweep {
            ns,
            kappa,
            tau,
            model,
            seeds,
            min_ratio,
        } => sweep(&ctx, ns, kappa, tau, &model, seeds, min_ratio),
        Command::Run => {
            let Some(config) = ctx.base.clone() else {
                bail!("run needs --config");
            };
            let dir = ctx
                .out_dir
                .clone()
                .or_else(|| config.output.dir.clone())
                .unwrap_or_else(|| PathBuf::from("proxasym-out"));
            let output = run(
                &config,
                &RunOptions {
                    jobs: ctx.jobs,
                    seed_base: ctx.seed,
                },
            )?;
            report_run(&output, Some(&dir))
        }
    }
}

#[derive(Serialize)]
struct SolveRecord {
    loss: String,
    noise: String,
    kappa: f64,
    tau: f64,
    r: f64,
    c: f64,
    eq1_residual: f64,
    eq2_residual: f64,
    iterations: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    tau_limit: Option<TauLimit>,
    failures: Vec<String>,
    passed: bool,
}

fn solve(
    ctx: &Ctx,
    kappa: Option<f64>,
    tau: Option<f64>,
    model: &ModelArgs,
    tau_limit: bool,
    out: Option<&Path>,
) -> Result<bool> {
    let m = ctx.models(model)?;
    let (kappa, tau) = ctx.kappa_tau(kappa, tau);
    let opts = SolverOptions::default();
    let sol = solve_system_with(kappa, tau, &m.loss, &m.noise, &opts)?;
    let mut failures = Vec::new();
    if sol.eq1_residual.abs() > opts.tolerance {
        failures.push(format!("eq1 residual {:e}", sol.eq1_residual));
    }
    if sol.eq2_residual.abs() > opts.tolerance * (1.0 + sol.r * sol.r) {
        failures.push(format!("eq2 residual {:e}", sol.eq2_residual));
    }
    let limit = if tau_limit {
        let lim = solve_tau_limit(kappa, &m.loss, &m.noise, &ctx.settings().tau_grid)?;
        if matches!(m.loss, LossModel::Quadratic) {
            let target = kappa * m.noise.variance() / (1.0 - kappa);
            let gap = (lim.r0 * lim.r0 - target).abs() / target;
            if gap > ctx.tolerances().tau_limit_rel {
                failures.push(format!("r0^2 off the ridgeless value by {gap:.4} relative"));
            }
        }
        Some(lim)
    } else {
        None
    };
    let record = SolveRecord {
        loss: m.loss.name(),
        noise: m.noise.name(),
        kappa,
        tau,
        r: sol.r,
        c: sol.c,
        eq1_residual: sol.eq1_residual,
        eq2_residual: sol.eq2_residual,
        iterations: sol.iterations,
        tau_limit: limit,
        passed: failures.is_empty(),
        failures,
    };
    let text = print_json(&record)?;
    match out {
        Some(path) => write_file(path, &text)?,
        None => ctx.write("solve.json", &text)?,
    }
    Ok(record.passed)
}

#[derive(Serialize)]
struct FitRecord {
    seed: u64,
    loss: String,
    noise: String,
    entry_law: EntryLaw,
    #[serde(flatten)]
    summary: FitSummary,
    wn_bound: f64,
    rho_bound: f64,
    objective_at_zero: f64,
    violations: Vec<String>,
    passed: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    beta_hat: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    residuals: Option<Vec<f64>>,
}

fn fit_once(ctx: &Ctx, cell: &CellArgs, model: &ModelArgs, out: Option<&Path>, dump: bool) -> Result<bool> {
    let m = ctx.models(model)?;
    let s = ctx.shape(cell)?;
    let seed = ctx.seed.unwrap_or(0);
    let design = gen_design_in_cell(s.n, s.p, m.entry_law, &m.noise, seed, 0)?;
    let f = fit(&design, &m.loss, s.tau)?;
    let bounds = fit_bounds(&design, &m.loss, &f);
    let record = FitRecord {
        seed,
        loss: m.loss.name(),
        noise: m.noise.name(),
        entry_law: m.entry_law,
        summary: f.summary(),
        wn_bound: bounds.wn_bound,
        rho_bound: bounds.rho_bound,
        objective_at_zero: bounds.objective_at_zero,
        passed: bounds.violations.is_empty(),
        violations: bounds.violations,
        beta_hat: dump.then(|| f.beta_hat.as_slice().to_vec()),
        residuals: dump.then(|| f.residuals.as_slice().to_vec()),
    };
    let text = print_json(&record)?;
    match out {
        Some(path) => write_file(path, &text)?,
        None => ctx.write("fit.json", &text)?,
    }
    Ok(record.passed)
}

// The csv writer cannot serialize flattened structs.
#[derive(Serialize)]
struct LooSeedRow {
    seed: u64,
    index: usize,
    r_tilde: f64,
    c_i: f64,
    err_beta: f64,
    err_resid: f64,
    refit_grad_norm: f64,
}

impl LooSeedRow {
    fn new(seed: u64, row: LooRow) -> Self {
        LooSeedRow {
            seed,
            index: row.index,
            r_tilde: row.r_tilde,
            c_i: row.c_i,
            err_beta: row.err_beta,
            err_resid: row.err_resid,
            refit_grad_norm: row.refit_grad_norm,
        }
    }
}

#[derive(Serialize)]
struct LooSeedSummary {
    seed: u64,
    c_tau: f64,
    #[serde(flatten)]
    summary: LooSummary,
}

#[derive(Serialize)]
struct LooOutput {
    loss: String,
    n: usize,
    p: usize,
    tau: f64,
    warm_start: bool,
    per_seed: Vec<LooSeedSummary>,
    pooled_median_err_beta: f64,
    pooled_max_err_beta: f64,
    failures: Vec<String>,
    passed: bool,
}

fn loo(
    ctx: &Ctx,
    cell: &CellArgs,
    model: &ModelArgs,
    seeds: Option<usize>,
    count: Option<usize>,
    all: bool,
    cold: bool,
) -> Result<bool> {
    let m = ctx.models(model)?;
    let s = ctx.shape(cell)?;
    let (settings, tolerances) = (ctx.settings(), ctx.tolerances());
    let opts = LooOptions {
        warm_start: !cold && settings.warm_start,
        ..LooOptions::default()
    };
    let count = count.unwrap_or(settings.loo_count);
    let mut rows = Vec::new();
    let mut per_seed = Vec::new();
    let mut errs = Vec::new();
    for seed in ctx.seeds(seeds, 1) {
        let design = gen_design_in_cell(s.n, s.p, m.entry_law, &m.noise, seed, 0)?;
        let f = fit(&design, &m.loss, s.tau)?;
        let idx = if all || settings.loo_all {
            (0..s.n).collect()
        } else {
            loo_indices(s.n, count, seed, 0)
        };
        let reports = with_jobs(ctx.jobs, || loo_report_with(&design, &m.loss, s.tau, &f, &idx, &opts))??;
        errs.extend(reports.iter().map(|r| r.err_beta));
        rows.extend(reports.iter().map(|r| LooSeedRow::new(seed, r.row())));
        per_seed.push(LooSeedSummary {
            seed,
            c_tau: f.c_tau,
            summary: summarize_loo(&reports, f.c_tau),
        });
    }
    let mut failures = Vec::new();
    if matches!(m.loss, LossModel::Quadratic) {
        let worst = per_seed
            .iter()
            .map(|s| s.summary.max_err_beta.max(s.summary.max_err_resid))
            .fold(0.0, f64::max);
        if worst > tolerances.quadratic_exact {
            failures.push(format!("quadratic identity off by {worst:e}"));
        }
    }
    let output = LooOutput {
        loss: m.loss.name(),
        n: s.n,
        p: s.p,
        tau: s.tau,
        warm_start: opts.warm_start,
        per_seed,
        pooled_median_err_beta: proxasym::diagnostics::loo::median(&errs),
        pooled_max_err_beta: errs.iter().copied().fold(0.0, f64::max),
        passed: failures.is_empty(),
        failures,
    };
    let text = print_json(&output)?;
    ctx.write("loo.json", &text)?;
    if let Some(dir) = &ctx.out_dir {
        let mut w = csv::Writer::from_path(dir.join("loo.csv"))?;
        for row in &rows {
            w.serialize(row)?;
        }
        w.flush()?;
    }
    Ok(output.passed)
}

fn harness_cell(ctx: &Ctx, model: &ModelArgs, s: Shape, seeds: Vec<u64>, checks: Vec<Check>) -> Result<bool> {
    let cell = Cell {
        n: s.n,
        kappa: s.kappa,
        tau: s.tau,
    };
    let config = ctx.harness_config(ctx.models(model)?, seeds, checks, vec![cell]);
    let output = run(
        &config,
        &RunOptions {
            jobs: ctx.jobs,
            seed_base: None,
        },
    )?;
    report_run(&output, ctx.out_dir.as_deref())
}

#[allow(clippy::too_many_arguments)]
fn sweep(
    ctx: &Ctx,
    mut ns: Vec<usize>,
    kappa: Option<f64>,
    tau: Option<f64>,
    model: &ModelArgs,
    seeds: Option<usize>,
    min_ratio: Option<f64>,
) -> Result<bool> {
    let (kappa, tau) = ctx.kappa_tau(kappa, tau);
    if ns.is_empty() {
        ns = vec![200, 400, 800];
    }
    ns.sort_unstable();
    ns.dedup();
    let cells = ns.iter().map(|&n| Cell { n, kappa, tau }).collect();
    let mut config = ctx.harness_config(ctx.models(model)?, ctx.seeds(seeds, 10), vec![Check::Variance], cells);
    if min_ratio.is_some() {
        config.tolerances.variance_ratio_min = min_ratio;
    }
    let output = run(
        &config,
        &RunOptions {
            jobs: ctx.jobs,
            seed_base: None,
        },
    )?;
    report_run(&output, ctx.out_dir.as_deref())
}

#[derive(Serialize)]
struct CellReport<'a> {
    cell: usize,
    n: usize,
    p: usize,
    kappa: f64,
    tau: f64,
    r: Option<f64>,
    c: Option<f64>,
    metrics: &'a BTreeMap<String, f64>,
    /// Per-seed metrics averaged over the cell's records.
    seed_means: BTreeMap<String, f64>,
}

#[derive(Serialize)]
struct RunReport<'a> {
    config_hash: &'a str,
    records: usize,
    cells: Vec<CellReport<'a>>,
    failures: Vec<String>,
    files: Vec<PathBuf>,
    passed: bool,
}

fn report_run(output: &RunOutput, dir: Option<&Path>) -> Result<bool> {
    let mut files = Vec::new();
    if let Some(dir) = dir {
        files = write_outputs(output, dir)?;
        match emit_plots(output, dir) {
            Ok(more) => files.extend(more),
            Err(Error::EmptySelection(_)) => {}
            Err(e) => return Err(e.into()),
        }
    }
    let report = RunReport {
        config_hash: &output.config_hash,
        records: output.records.len(),
        cells: output
            .cells
            .iter()
            .map(|c| CellReport {
                cell: c.cell,
                n: c.n,
                p: c.p,
                kappa: c.kappa,
                tau: c.tau,
                r: c.prediction.as_ref().map(|s| s.r),
                c: c.prediction.as_ref().map(|s| s.c),
                metrics: &c.metrics,
                seed_means: seed_means(output, c.cell),
            })
            .collect(),
        failures: output.failures(),
        files,
        passed: output.passed,
    };
    print_json(&report)?;
    Ok(output.passed)
}

fn seed_means(output: &RunOutput, cell: usize) -> BTreeMap<String, f64> {
    let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for r in output.records.iter().filter(|r| r.cell == cell) {
        for (k, v) in &r.metrics {
            let e = sums.entry(k.clone()).or_insert((0.0, 0));
            e.0 += v;
            e.1 += 1;
        }
    }
    sums.into_iter().map(|(k, (s, m))| (k, s / m as f64)).collect()
}
