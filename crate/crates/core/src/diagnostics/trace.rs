//! Change of `tr((A + tau I)^-1)` when a row and column are appended.
//!
//! With `A = [[Gamma, v], [v', a]]` and `Gamma_tau = Gamma + tau I`,
//!
//! ```text
//! tr((A + tau)^-1) - tr(Gamma_tau^-1) = (1 + v' Gamma_tau^-2 v) / (a + tau - v' Gamma_tau^-1 v)
//! ```
//!
//! and the difference never exceeds `(1 + a / tau) / tau` in absolute value.

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::trace_of_inverse;
use crate::rng::{stream, tag};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TracePerturbation {
    /// `|tr((A + tau)^-1) - tr(Gamma_tau^-1)|` by eigendecomposition.
    pub difference: f64,
    /// The same quantity from the block-inverse formula.
    pub formula: f64,
    pub bound: f64,
}

pub fn trace_perturbation(a: &DMatrix<f64>, tau: f64) -> Result<TracePerturbation> {
    let dim = a.nrows();
    if dim < 2 || a.ncols() != dim {
        return Err(Error::InvalidArgument(
            "trace perturbation needs a square matrix of size >= 2".into(),
        ));
    }
    let k = dim - 1;
    let gamma = a.view((0, 0), (k, k)).into_owned();
    let v: DVector<f64> = a.view((0, k), (k, 1)).column(0).into_owned();
    let corner = a[(k, k)];
    let full = trace_of_inverse(a, tau)?;
    let reduced = trace_of_inverse(&gamma, tau)?;

    let mut shifted = gamma;
    for j in 0..k {
        shifted[(j, j)] += tau;
    }
    let chol = shifted.cholesky().ok_or(Error::SingularHessian)?;
    let w = chol.solve(&v);
    let formula = (1.0 + w.norm_squared()) / (corner + tau - v.dot(&w));
    Ok(TracePerturbation {
        difference: (full - reduced).abs(),
        formula,
        bound: (1.0 + corner / tau) / tau,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceCheck {
    pub draws: usize,
    pub violations: usize,
    /// Largest `difference / bound`; below 1 means the bound held everywhere.
    pub max_ratio: f64,
    /// Largest gap between the eigenvalue and block-formula differences.
    pub max_formula_error: f64,
}

/// Random Wishart matrices `G'G / m` with `G` of size `m x dim`, `m` varying around `dim`.
pub fn trace_perturbation_check(dim: usize, draws: usize, tau: f64, seed: u64) -> Result<TraceCheck> {
    if dim < 2 {
        return Err(Error::InvalidArgument(format!("dim must be >= 2, got {dim}")));
    }
    let mut rng = stream(seed, dim as u64, tag::TRACE_CHECK);
    let mut out = TraceCheck {
        draws,
        violations: 0,
        max_ratio: 0.0,
        max_formula_error: 0.0,
    };
    for k in 0..draws {
        // Rank-deficient, square and tall factors in turn.
        let m = [dim / 2 + 1, dim, 3 * dim][k % 3];
        let g = DMatrix::from_fn(m, dim, |_, _| StandardNormal.sample(&mut rng));
        let a = g.tr_mul(&g) / m as f64;
        let t = trace_perturbation(&a, tau)?;
        if t.difference > t.bound {
            out.violations += 1;
        }
        out.max_ratio = out.max_ratio.max(t.difference / t.bound);
        out.max_formula_error = out
            .max_formula_error
            .max((t.difference - t.formula).abs() / t.formula.max(1.0));
    }
    Ok(out)
}
