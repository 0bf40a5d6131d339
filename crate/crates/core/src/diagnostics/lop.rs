//! Leave-one-predictor-out: refit without the last column and rebuild it.

use nalgebra::{Cholesky, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{curvature_matrix, fit_with, Design, FitOptions, FitResult};
use crate::losses::LossModel;

#[derive(Debug, Clone, PartialEq)]
pub struct LopReport {
    /// Fit on the first `p - 1` columns `V`.
    pub gamma_hat: DVector<f64>,
    /// `V' W X(p) / n` with `W = diag(psi'(r_[p]))`.
    pub u_p: DVector<f64>,
    /// `(1/n) sum_i X_i(p)^2 w_i - u' (S_p + tau I)^-1 u`.
    pub xi_n: f64,
    /// `n^{-1/2} sum_i X_i(p) psi(r_{i,[p]})`.
    pub n_p: f64,
    /// `N_p / (sqrt(n) (tau + xi_n))`.
    pub b_frak: f64,
    /// `[gamma_hat - b_frak (S_p + tau I)^-1 u ; b_frak]`.
    pub b_tilde: DVector<f64>,
    /// `tr((S_p + tau I)^-1) / n`.
    pub c_tau_p: f64,
    pub err_last_coord: f64,
    pub err_vector: f64,
    pub err_resid_sup: f64,
    /// `(1/n) sum_i (w_i / n) V_i' (S_p + tau I)^-1 V_i`, computed term by term.
    pub trace_direct: f64,
    /// `(p - 1)/n - tau c_tau_p`.
    pub trace_identity: f64,
    /// `|(S_p + tau I)^-1 u|^2`.
    pub z_norm_sq: f64,
    /// `(1/n) sum_i X_i(p)^2 w_i`.
    pub z_norm_bound: f64,
    /// `max_i |(1/n) V_i' (S_p(i) + tau I)^-1 V_i - c_tau_p|`, with `S_p(i)` omitting row `i`.
    pub max_eta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LopSummary {
    pub xi_n: f64,
    pub n_p: f64,
    pub b_frak: f64,
    pub beta_last: f64,
    pub c_tau_p: f64,
    pub err_last_coord: f64,
    pub err_vector: f64,
    pub err_resid_sup: f64,
    pub trace_error: f64,
    pub z_norm_sq: f64,
    pub z_norm_bound: f64,
    pub max_eta: f64,
}

impl LopReport {
    pub fn trace_error(&self) -> f64 {
        (self.trace_direct - self.trace_identity).abs()
    }

    pub fn summary(&self, full_fit: &FitResult) -> LopSummary {
        LopSummary {
            xi_n: self.xi_n,
            n_p: self.n_p,
            b_frak: self.b_frak,
            beta_last: full_fit.beta_hat[full_fit.beta_hat.len() - 1],
            c_tau_p: self.c_tau_p,
            err_last_coord: self.err_last_coord,
            err_vector: self.err_vector,
            err_resid_sup: self.err_resid_sup,
            trace_error: self.trace_error(),
            z_norm_sq: self.z_norm_sq,
            z_norm_bound: self.z_norm_bound,
            max_eta: self.max_eta,
        }
    }
}

pub fn lop_report(design: &Design, loss: &LossModel, tau: f64, full_fit: &FitResult) -> Result<LopReport> {
    let (n, p) = (design.n(), design.p());
    if p < 2 {
        return Err(Error::InvalidArgument("leave-one-predictor-out needs p >= 2".into()));
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "leave-one-predictor-out needs tau > 0, got {tau}"
        )));
    }
    let nf = n as f64;
    let reduced = design.first_columns(p - 1);
    let start = full_fit.beta_hat.rows(0, p - 1).into_owned();
    let gamma = fit_with(&reduced, loss, tau, &FitOptions::default(), Some(&start))?;
    let resid = &gamma.residuals;
    let w = resid.map(|r| loss.psi_prime(r));
    let xp = design.x.column(p - 1).into_owned();
    let v = &reduced.x;

    let u = v.tr_mul(&xp.component_mul(&w)) / nf;
    let chol = Cholesky::new(curvature_matrix(v, &w, nf, tau)).ok_or(Error::SingularHessian)?;
    let z = chol.solve(&u);
    let weighted_sq = xp.iter().zip(w.iter()).map(|(x, w)| x * x * w).sum::<f64>() / nf;
    let xi_n = weighted_sq - u.dot(&z);
    let n_p = xp.dot(&resid.map(|r| loss.psi(r))) / nf.sqrt();
    let b_frak = n_p / (nf.sqrt() * (tau + xi_n));

    let mut b_tilde = DVector::zeros(p);
    b_tilde.rows_mut(0, p - 1).copy_from(&(&gamma.beta_hat - &z * b_frak));
    b_tilde[p - 1] = b_frak;

    let k_inv = chol.inverse();
    let c_tau_p = k_inv.trace() / nf;
    // q_i = V_i' K^-1 V_i for every row.
    let vk = v * &k_inv;
    let q: Vec<f64> = (0..n).map(|i| vk.row(i).dot(&v.row(i))).collect();
    let trace_direct = q.iter().zip(w.iter()).map(|(q, w)| w / nf * q).sum::<f64>() / nf;
    // Rank-one downdate of K by w_i V_i V_i' / n.
    let max_eta = q
        .iter()
        .zip(w.iter())
        .map(|(&q, &w)| (q / (1.0 - w / nf * q) / nf - c_tau_p).abs())
        .fold(0.0, f64::max);

    Ok(LopReport {
        err_last_coord: nf.sqrt() * (full_fit.beta_hat[p - 1] - b_frak).abs(),
        err_vector: (&full_fit.beta_hat - &b_tilde).norm(),
        err_resid_sup: (&full_fit.residuals - resid).amax(),
        trace_identity: (p - 1) as f64 / nf - tau * c_tau_p,
        z_norm_sq: z.norm_squared(),
        z_norm_bound: weighted_sq,
        gamma_hat: gamma.beta_hat,
        u_p: u,
        xi_n,
        n_p,
        b_frak,
        b_tilde,
        c_tau_p,
        trace_direct,
        max_eta,
    })
}
