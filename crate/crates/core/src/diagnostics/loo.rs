//! Leave-one-observation-out refits and their rank-one approximations.

use nalgebra::{Cholesky, DVector};
use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{curvature_matrix, Design, FitOptions, FitResult, Problem};
use crate::losses::{prox, LossModel};
use crate::rng::{stream, tag};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LooOptions {
    /// Start each refit at the full-sample solution.
    pub warm_start: bool,
    pub fit: FitOptions,
}

impl Default for LooOptions {
    fn default() -> Self {
        LooOptions {
            warm_start: true,
            fit: FitOptions::default(),
        }
    }
}

/// Leave-one-out quantities for one index.
#[derive(Debug, Clone, PartialEq)]
pub struct LooReport {
    pub index: usize,
    /// Exact minimizer without observation `i` (normalization still `1/n`).
    pub beta_loo: DVector<f64>,
    /// `eps_i - X_i' beta_loo`.
    pub r_tilde: f64,
    /// `(1/n) X_i' (S_i + tau I)^-1 X_i`.
    pub c_i: f64,
    /// `beta_loo + (1/n) (S_i + tau I)^-1 X_i psi(prox_{c_i}(r_tilde))`.
    pub beta_tilde: DVector<f64>,
    /// `|beta_hat - beta_tilde|`.
    pub err_beta: f64,
    /// `|R_i - prox_{c_i}(r_tilde)|`.
    pub err_resid: f64,
    pub refit_grad_norm: f64,
}

/// Row of a [`LooReport`] without the vectors, for tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LooRow {
    pub index: usize,
    pub r_tilde: f64,
    pub c_i: f64,
    pub err_beta: f64,
    pub err_resid: f64,
    pub refit_grad_norm: f64,
}

impl LooReport {
    pub fn row(&self) -> LooRow {
        LooRow {
            index: self.index,
            r_tilde: self.r_tilde,
            c_i: self.c_i,
            err_beta: self.err_beta,
            err_resid: self.err_resid,
            refit_grad_norm: self.refit_grad_norm,
        }
    }
}

/// `count` distinct indices out of `0..n`, or all of them when `count >= n`.
pub fn loo_indices(n: usize, count: usize, seed: u64, cell: u64) -> Vec<usize> {
    if count >= n {
        return (0..n).collect();
    }
    let mut rng = stream(seed, cell, tag::LOO_INDICES);
    let mut idx = sample(&mut rng, n, count).into_vec();
    idx.sort_unstable();
    idx
}

pub fn loo_report(
    design: &Design,
    loss: &LossModel,
    tau: f64,
    full_fit: &FitResult,
    indices: &[usize],
) -> Result<Vec<LooReport>> {
    loo_report_with(design, loss, tau, full_fit, indices, &LooOptions::default())
}

pub fn loo_report_with(
    design: &Design,
    loss: &LossModel,
    tau: f64,
    full_fit: &FitResult,
    indices: &[usize],
    opts: &LooOptions,
) -> Result<Vec<LooReport>> {
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "leave-one-out needs tau > 0, got {tau}"
        )));
    }
    // Refits are independent; collecting keeps index order.
    indices
        .par_iter()
        .map(|&i| loo_single(design, loss, tau, full_fit, i, opts))
        .collect()
}

fn loo_single(
    design: &Design,
    loss: &LossModel,
    tau: f64,
    full_fit: &FitResult,
    i: usize,
    opts: &LooOptions,
) -> Result<LooReport> {
    let n = design.n();
    if i >= n {
        return Err(Error::InvalidArgument(format!("index {i} out of range for n = {n}")));
    }
    let reduced = design.without_row(i);
    let problem = Problem {
        x: &reduced.x,
        eps: &reduced.eps,
        loss,
        tau,
        normalizer: n as f64,
    };
    let start = opts.warm_start.then_some(&full_fit.beta_hat);
    let min = problem.minimize(start, &opts.fit)?;
    let weights = min.residuals.map(|r| loss.psi_prime(r));
    let chol = Cholesky::new(curvature_matrix(&reduced.x, &weights, n as f64, tau)).ok_or(Error::SingularHessian)?;

    let xi = design.x.row(i).transpose();
    let r_tilde = design.eps[i] - xi.dot(&min.beta);
    let direction = chol.solve(&xi);
    let c_i = xi.dot(&direction) / n as f64;
    let pv = prox(loss, c_i, r_tilde)?;
    let beta_tilde = &min.beta + &direction * (pv.psi_at_y / n as f64);
    Ok(LooReport {
        index: i,
        r_tilde,
        c_i,
        err_beta: (&full_fit.beta_hat - &beta_tilde).norm(),
        err_resid: (full_fit.residuals[i] - pv.y).abs(),
        beta_tilde,
        beta_loo: min.beta,
        refit_grad_norm: min.grad_norm,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LooSummary {
    pub count: usize,
    pub median_err_beta: f64,
    pub max_err_beta: f64,
    pub median_err_resid: f64,
    pub max_err_resid: f64,
    /// `max_i |c_i - c_tau|`.
    pub sup_c_deviation: f64,
}

pub fn summarize_loo(reports: &[LooReport], c_tau: f64) -> LooSummary {
    let beta: Vec<f64> = reports.iter().map(|r| r.err_beta).collect();
    let resid: Vec<f64> = reports.iter().map(|r| r.err_resid).collect();
    LooSummary {
        count: reports.len(),
        median_err_beta: median(&beta),
        max_err_beta: beta.iter().cloned().fold(0.0, f64::max),
        median_err_resid: median(&resid),
        max_err_resid: resid.iter().cloned().fold(0.0, f64::max),
        sup_c_deviation: reports.iter().map(|r| (r.c_i - c_tau).abs()).fold(0.0, f64::max),
    }
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}
