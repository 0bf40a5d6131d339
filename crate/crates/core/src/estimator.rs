//! Finite-sample ridge-regularized M-estimation with `beta_0 = 0`.
//!
//! ```text
//! F(b) = (1/n) sum_i rho(eps_i - X_i' b) + tau/2 |b|^2
//! f(b) = -(1/n) sum_i X_i psi(eps_i - X_i' b) + tau b
//! ```

use std::fmt;
use std::str::FromStr;

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossModel;
use crate::noise::NoiseModel;
use crate::rng::{stream, tag};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryLaw {
    Gaussian,
    Rademacher,
    /// Uniform on `[-sqrt 3, sqrt 3]`.
    UniformScaled,
}

impl EntryLaw {
    pub const ALL: [EntryLaw; 3] = [EntryLaw::Gaussian, EntryLaw::Rademacher, EntryLaw::UniformScaled];

    pub fn as_str(&self) -> &'static str {
        match self {
            EntryLaw::Gaussian => "gaussian",
            EntryLaw::Rademacher => "rademacher",
            EntryLaw::UniformScaled => "uniform_scaled",
        }
    }

    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            EntryLaw::Gaussian => StandardNormal.sample(rng),
            EntryLaw::Rademacher => {
                if rng.random::<bool>() {
                    1.0
                } else {
                    -1.0
                }
            }
            EntryLaw::UniformScaled => 3f64.sqrt() * rng.random_range(-1.0..=1.0),
        }
    }
}

impl FromStr for EntryLaw {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EntryLaw::ALL
            .into_iter()
            .find(|law| law.as_str() == s)
            .ok_or_else(|| Error::UnknownEntryLaw(s.to_string()))
    }
}

impl fmt::Display for EntryLaw {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Design matrix (rows are observations) and errors.
#[derive(Debug, Clone, PartialEq)]
pub struct Design {
    pub x: DMatrix<f64>,
    pub eps: DVector<f64>,
    pub seed: u64,
    /// `None` when the matrix was supplied by the caller.
    pub entry_law: Option<EntryLaw>,
}

impl Design {
    pub fn from_parts(x: DMatrix<f64>, eps: DVector<f64>) -> Result<Self> {
        if x.nrows() != eps.len() || x.nrows() == 0 || x.ncols() == 0 {
            return Err(Error::InvalidArgument(format!(
                "design is {}x{} but eps has length {}",
                x.nrows(),
                x.ncols(),
                eps.len()
            )));
        }
        if x.iter().chain(eps.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput(
                "design or errors contain non-finite values".into(),
            ));
        }
        Ok(Design {
            x,
            eps,
            seed: 0,
            entry_law: None,
        })
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    /// Sample mean and variance of the entries of `X`.
    pub fn entry_moments(&self) -> (f64, f64) {
        let m = self.x.len() as f64;
        let mean = self.x.iter().sum::<f64>() / m;
        let var = self.x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m;
        (mean, var)
    }

    /// Copy with observation `i` removed.
    pub fn without_row(&self, i: usize) -> Design {
        Design {
            x: self.x.clone().remove_row(i),
            eps: self.eps.clone().remove_row(i),
            ..self.clone()
        }
    }

    /// Copy keeping only the first `k` predictors.
    pub fn first_columns(&self, k: usize) -> Design {
        Design {
            x: self.x.columns(0, k).into_owned(),
            ..self.clone()
        }
    }
}

pub fn gen_design(n: usize, p: usize, entry_law: EntryLaw, noise: &NoiseModel, seed: u64) -> Result<Design> {
    gen_design_in_cell(n, p, entry_law, noise, seed, 0)
}

/// Design for one cell of an experiment grid; `X` and `eps` come from distinct streams.
pub fn gen_design_in_cell(
    n: usize,
    p: usize,
    entry_law: EntryLaw,
    noise: &NoiseModel,
    seed: u64,
    cell: u64,
) -> Result<Design> {
    if n == 0 || p == 0 {
        return Err(Error::InvalidArgument(format!("need n, p >= 1, got n = {n}, p = {p}")));
    }
    noise.validate()?;
    let mut design_rng = stream(seed, cell, tag::DESIGN);
    let mut noise_rng = stream(seed, cell, tag::NOISE);
    // Row-major fill so that row i does not depend on n.
    let x = DMatrix::from_row_iterator(n, p, (0..n * p).map(|_| entry_law.draw(&mut design_rng)));
    let eps = DVector::from_vec(noise.sample(&mut noise_rng, n));
    Ok(Design {
        x,
        eps,
        seed,
        entry_law: Some(entry_law),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    /// Contract: `|f(b)| <= tolerance (1 + |b|)` at exit.
    pub tolerance: f64,
    /// Newton keeps going until this tighter level unless rounding stops it.
    pub target: f64,
    pub max_iter: usize,
    pub armijo: f64,
    pub max_backtracks: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            tolerance: 1e-8,
            target: 1e-12,
            max_iter: 200,
            armijo: 1e-4,
            max_backtracks: 60,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub beta_hat: DVector<f64>,
    /// `R_i = eps_i - X_i' beta_hat`.
    pub residuals: DVector<f64>,
    /// `tr((S + tau I)^-1) / n`.
    pub c_tau: f64,
    pub grad_norm: f64,
    pub objective: f64,
    pub iterations: usize,
    pub tau: f64,
}

impl FitResult {
    pub fn beta_norm(&self) -> f64 {
        self.beta_hat.norm()
    }

    pub fn summary(&self) -> FitSummary {
        let r = self.residuals.as_slice();
        let n = r.len() as f64;
        let mean = r.iter().sum::<f64>() / n;
        FitSummary {
            n: r.len(),
            p: self.beta_hat.len(),
            tau: self.tau,
            beta_norm: self.beta_norm(),
            c_tau: self.c_tau,
            grad_norm: self.grad_norm,
            objective: self.objective,
            iterations: self.iterations,
            residual_mean: mean,
            residual_sd: (r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt(),
            residual_max_abs: r.iter().fold(0.0, |m, v| m.max(v.abs())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub n: usize,
    pub p: usize,
    pub tau: f64,
    pub beta_norm: f64,
    pub c_tau: f64,
    pub grad_norm: f64,
    pub objective: f64,
    pub iterations: usize,
    pub residual_mean: f64,
    pub residual_sd: f64,
    pub residual_max_abs: f64,
}

/// The penalized objective on a given sample, with an explicit normalizer.
///
/// Leave-one-out refits drop a row but keep dividing by the full `n`.
pub(crate) struct Problem<'a> {
    pub x: &'a DMatrix<f64>,
    pub eps: &'a DVector<f64>,
    pub loss: &'a LossModel,
    pub tau: f64,
    pub normalizer: f64,
}

pub(crate) struct Minimum {
    pub beta: DVector<f64>,
    pub residuals: DVector<f64>,
    pub objective: f64,
    pub grad_norm: f64,
    pub iterations: usize,
}

impl Problem<'_> {
    pub fn residuals(&self, beta: &DVector<f64>) -> DVector<f64> {
        self.eps - self.x * beta
    }

    pub fn objective_at(&self, beta: &DVector<f64>, resid: &DVector<f64>) -> f64 {
        resid.iter().map(|&r| self.loss.rho(r)).sum::<f64>() / self.normalizer + 0.5 * self.tau * beta.norm_squared()
    }

    pub fn gradient_at(&self, beta: &DVector<f64>, resid: &DVector<f64>) -> DVector<f64> {
        let scores = resid.map(|r| self.loss.psi(r));
        let mut g = beta * self.tau;
        g.gemv_tr(-1.0 / self.normalizer, self.x, &scores, 1.0);
        g
    }

    pub fn hessian_at(&self, resid: &DVector<f64>) -> DMatrix<f64> {
        let weights = resid.map(|r| self.loss.psi_prime(r));
        curvature_matrix(self.x, &weights, self.normalizer, self.tau)
    }

    pub fn minimize(&self, start: Option<&DVector<f64>>, opts: &FitOptions) -> Result<Minimum> {
        let p = self.x.ncols();
        let mut beta = start.cloned().unwrap_or_else(|| DVector::zeros(p));
        let mut resid = self.residuals(&beta);
        let mut obj = self.objective_at(&beta, &resid);
        let mut grad = self.gradient_at(&beta, &resid);
        let mut gn = grad.norm();
        let mut iterations = 0;
        while gn > opts.target * (1.0 + beta.norm()) {
            if iterations == opts.max_iter {
                break;
            }
            iterations += 1;
            let chol = Cholesky::new(self.hessian_at(&resid)).ok_or(Error::SingularHessian)?;
            let dir = -chol.solve(&grad);
            let slope = grad.dot(&dir);
            let mut step = 1.0;
            let mut accepted = None;
            for _ in 0..opts.max_backtracks {
                let cand = &beta + &dir * step;
                let cres = self.residuals(&cand);
                let cobj = self.objective_at(&cand, &cres);
                if cobj <= obj + opts.armijo * step * slope {
                    accepted = Some((cand, cres, cobj, None));
                    break;
                }
                // Near the optimum F stops resolving progress; fall back on the gradient.
                if cobj <= obj + 1e-14 * (1.0 + obj.abs()) {
                    let cgrad = self.gradient_at(&cand, &cres);
                    if cgrad.norm() < gn {
                        accepted = Some((cand, cres, cobj, Some(cgrad)));
                        break;
                    }
                }
                step *= 0.5;
            }
            match accepted {
                Some((cand, cres, cobj, cgrad)) => {
                    grad = cgrad.unwrap_or_else(|| self.gradient_at(&cand, &cres));
                    beta = cand;
                    resid = cres;
                    obj = cobj;
                    gn = grad.norm();
                    if !gn.is_finite() {
                        return Err(Error::NonFiniteIterate(iterations));
                    }
                }
                None if gn <= opts.tolerance * (1.0 + beta.norm()) => break,
                None => {
                    return Err(Error::LineSearchFailure {
                        iteration: iterations,
                        grad_norm: gn,
                    })
                }
            }
        }
        if gn > opts.tolerance * (1.0 + beta.norm()) {
            return Err(Error::ConvergenceFailure {
                iterations,
                residual: gn,
            });
        }
        Ok(Minimum {
            beta,
            residuals: resid,
            objective: obj,
            grad_norm: gn,
            iterations,
        })
    }
}

/// `(1/normalizer) X' diag(w) X + tau I`.
pub fn curvature_matrix(x: &DMatrix<f64>, weights: &DVector<f64>, normalizer: f64, tau: f64) -> DMatrix<f64> {
    let mut scaled = x.clone();
    for (mut row, &w) in scaled.row_iter_mut().zip(weights.iter()) {
        row *= w.max(0.0).sqrt();
    }
    let mut s = scaled.tr_mul(&scaled) / normalizer;
    for j in 0..s.nrows() {
        s[(j, j)] += tau;
    }
    s
}

fn check_tau(design: &Design, loss: &LossModel, tau: f64) -> Result<()> {
    if !(tau.is_finite() && tau >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "tau must be finite and >= 0, got {tau}"
        )));
    }
    if tau == 0.0 && !(loss.strong_convexity() > 0.0 && design.p() < design.n()) {
        return Err(Error::InvalidArgument(
            "tau = 0 needs a strongly convex loss and p < n".into(),
        ));
    }
    Ok(())
}

pub fn fit(design: &Design, loss: &LossModel, tau: f64) -> Result<FitResult> {
    fit_with(design, loss, tau, &FitOptions::default(), None)
}

pub fn fit_with(
    design: &Design,
    loss: &LossModel,
    tau: f64,
    opts: &FitOptions,
    start: Option<&DVector<f64>>,
) -> Result<FitResult> {
    loss.validate()?;
    check_tau(design, loss, tau)?;
    let problem = Problem {
        x: &design.x,
        eps: &design.eps,
        loss,
        tau,
        normalizer: design.n() as f64,
    };
    let min = problem.minimize(start, opts)?;
    let weights = min.residuals.map(|r| loss.psi_prime(r));
    let c_tau =
        trace_of_inverse(&curvature_matrix(&design.x, &weights, design.n() as f64, 0.0), tau)? / design.n() as f64;
    Ok(FitResult {
        beta_hat: min.beta,
        residuals: min.residuals,
        c_tau,
        grad_norm: min.grad_norm,
        objective: min.objective,
        iterations: min.iterations,
        tau,
    })
}

/// `tr((S + tau I)^-1)` from the eigenvalues of the symmetric matrix `S`.
pub fn trace_of_inverse(s: &DMatrix<f64>, tau: f64) -> Result<f64> {
    let eig = s.clone().symmetric_eigenvalues();
    let mut acc = 0.0;
    for &l in eig.iter() {
        let shifted = l.max(0.0) + tau;
        if !(shifted > 0.0) {
            return Err(Error::SingularHessian);
        }
        acc += 1.0 / shifted;
    }
    Ok(acc)
}

/// `c_tau` recomputed from the residuals of `fit`.
pub fn curvature_trace(design: &Design, loss: &LossModel, fit: &FitResult) -> Result<f64> {
    let weights = fit.residuals.map(|r| loss.psi_prime(r));
    let s = curvature_matrix(&design.x, &weights, design.n() as f64, 0.0);
    Ok(trace_of_inverse(&s, fit.tau)? / design.n() as f64)
}

pub fn objective(design: &Design, loss: &LossModel, tau: f64, beta: &DVector<f64>) -> f64 {
    let problem = Problem {
        x: &design.x,
        eps: &design.eps,
        loss,
        tau,
        normalizer: design.n() as f64,
    };
    problem.objective_at(beta, &problem.residuals(beta))
}

/// `f(beta)`, the gradient of the objective.
pub fn gradient(design: &Design, loss: &LossModel, tau: f64, beta: &DVector<f64>) -> DVector<f64> {
    let problem = Problem {
        x: &design.x,
        eps: &design.eps,
        loss,
        tau,
        normalizer: design.n() as f64,
    };
    problem.gradient_at(beta, &problem.residuals(beta))
}

/// Smallest eigenvalue of `X'X / n`.
pub fn lambda_min(design: &Design) -> f64 {
    let gram = design.x.tr_mul(&design.x) / design.n() as f64;
    gram.symmetric_eigenvalues().min()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitBounds {
    pub beta_norm: f64,
    /// `|W_n| / tau` with `W_n = (1/n) sum_i X_i psi(eps_i)`.
    pub wn_bound: f64,
    /// `sqrt(2 / tau) sqrt(mean rho(eps_i))`.
    pub rho_bound: f64,
    pub objective: f64,
    pub objective_at_zero: f64,
    pub grad_norm: f64,
    pub violations: Vec<String>,
}

impl FitBounds {
    pub fn holds(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Deterministic bounds every converged fit must satisfy.
pub fn fit_bounds(design: &Design, loss: &LossModel, fit: &FitResult) -> FitBounds {
    let n = design.n() as f64;
    let tau = fit.tau;
    let scores = design.eps.map(|e| loss.psi(e));
    let wn = design.x.tr_mul(&scores) / n;
    let mean_rho = design.eps.iter().map(|&e| loss.rho(e)).sum::<f64>() / n;
    let beta_norm = fit.beta_norm();
    let slack = 1e-10 * (1.0 + beta_norm);
    let mut out = FitBounds {
        beta_norm,
        wn_bound: wn.norm() / tau,
        rho_bound: (2.0 / tau).sqrt() * mean_rho.sqrt(),
        objective: fit.objective,
        objective_at_zero: mean_rho,
        grad_norm: fit.grad_norm,
        violations: Vec::new(),
    };
    if tau > 0.0 {
        if beta_norm > out.wn_bound + slack {
            out.violations
                .push(format!("|beta| = {beta_norm} > |W_n|/tau = {}", out.wn_bound));
        }
        if beta_norm > out.rho_bound + slack {
            out.violations
                .push(format!("|beta| = {beta_norm} > sqrt(2/tau) bound {}", out.rho_bound));
        }
    }
    if fit.objective > mean_rho + 1e-12 * (1.0 + mean_rho) {
        out.violations
            .push(format!("F(beta) = {} > F(0) = {mean_rho}", fit.objective));
    }
    if fit.grad_norm > 1e-8 * (1.0 + beta_norm) {
        out.violations
            .push(format!("gradient norm {} above tolerance", fit.grad_norm));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferCheck {
    /// Largest `|beta_hat - b| / (|f(b)| / tau)` over the probes.
    pub max_ratio: f64,
    /// Same against `|f(b)| / (C lambda_min + tau)`, for strongly convex losses.
    pub max_ratio_strong: Option<f64>,
    pub probes: usize,
}

/// Probes `|beta_hat - b| <= |f(b)| / tau` (and its strongly convex sharpening) at random `b`.
pub fn optimality_transfer<R: Rng + ?Sized>(
    design: &Design,
    loss: &LossModel,
    fit: &FitResult,
    rng: &mut R,
    probes: usize,
) -> TransferCheck {
    let p = design.p();
    let strong = loss.strong_convexity();
    let floor = if strong > 0.0 {
        Some(strong * lambda_min(design))
    } else {
        None
    };
    let scale = fit.beta_norm().max(1.0);
    let mut out = TransferCheck {
        max_ratio: 0.0,
        max_ratio_strong: floor.map(|_| 0.0),
        probes,
    };
    for k in 0..probes {
        let radius = scale * rng.random_range(0.01..2.0);
        let noise = DVector::from_fn(p, |_, _| StandardNormal.sample(rng));
        let noise = noise.normalize() * radius;
        // Alternate probes centred at zero and at the optimum.
        let b = if k % 2 == 0 { noise } else { &fit.beta_hat + noise };
        let g = gradient(design, loss, fit.tau, &b).norm();
        let dist = (&fit.beta_hat - &b).norm();
        out.max_ratio = out.max_ratio.max(dist * fit.tau / g);
        if let (Some(floor), Some(m)) = (floor, out.max_ratio_strong.as_mut()) {
            *m = m.max(dist * (floor + fit.tau) / g);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TauBoundRow {
    pub tau: f64,
    /// `|beta_tau - beta_0|`.
    pub distance: f64,
    /// `sqrt(2 tau) / (C lambda_min) sqrt(mean rho(eps))`.
    pub bound: f64,
    pub beta_norm: f64,
}

/// Distance of the penalized fits to the unpenalized one, against the `sqrt(tau)` bound.
pub fn tau_limit_bound(design: &Design, loss: &LossModel, taus: &[f64]) -> Result<Vec<TauBoundRow>> {
    let strong = loss.strong_convexity();
    let base = fit(design, loss, 0.0)?;
    let lmin = lambda_min(design);
    let mean_rho = design.eps.iter().map(|&e| loss.rho(e)).sum::<f64>() / design.n() as f64;
    let mut rows = Vec::with_capacity(taus.len());
    let mut start = base.beta_hat.clone();
    for &tau in taus {
        let f = fit_with(design, loss, tau, &FitOptions::default(), Some(&start))?;
        rows.push(TauBoundRow {
            tau,
            distance: (&f.beta_hat - &base.beta_hat).norm(),
            bound: (2.0 * tau).sqrt() / (strong * lmin) * mean_rho.sqrt(),
            beta_norm: f.beta_norm(),
        });
        start = f.beta_hat;
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathPoint {
    pub tau: f64,
    pub beta: DVector<f64>,
}

/// Quadratic-loss ridge path by conjugate gradients on the normal equations,
/// never forming `X'X`. `tau = 0` is allowed when `p < n`.
pub fn fit_path(design: &Design, taus: &[f64]) -> Result<Vec<PathPoint>> {
    let n = design.n() as f64;
    let rhs = design.x.tr_mul(&design.eps) / n;
    let mut start = DVector::zeros(design.p());
    let mut out = Vec::with_capacity(taus.len());
    for &tau in taus {
        check_tau(design, &LossModel::Quadratic, tau)?;
        let apply = |v: &DVector<f64>| {
            let xv = &design.x * v;
            design.x.tr_mul(&xv) / n + v * tau
        };
        let beta = conjugate_gradient(apply, &rhs, &start, 1e-13, 10 * design.p() + 100)?;
        start = beta.clone();
        out.push(PathPoint { tau, beta });
    }
    Ok(out)
}

fn conjugate_gradient<A>(
    apply: A,
    b: &DVector<f64>,
    x0: &DVector<f64>,
    rtol: f64,
    max_iter: usize,
) -> Result<DVector<f64>>
where
    A: Fn(&DVector<f64>) -> DVector<f64>,
{
    let mut x = x0.clone();
    let mut r = b - apply(&x);
    let mut d = r.clone();
    let mut rr = r.norm_squared();
    let stop = (rtol * b.norm()).powi(2);
    for _ in 0..max_iter {
        if rr <= stop {
            return Ok(x);
        }
        let ad = apply(&d);
        let alpha = rr / d.dot(&ad);
        x.axpy(alpha, &d, 1.0);
        r.axpy(-alpha, &ad, 1.0);
        let rr_new = r.norm_squared();
        d = &r + &d * (rr_new / rr);
        rr = rr_new;
    }
    Err(Error::ConvergenceFailure {
        iterations: max_iter,
        residual: rr.sqrt(),
    })
}
