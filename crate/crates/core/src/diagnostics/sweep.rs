//! Replication over seeds: variance of `|beta_hat|^2` and concentration of `c_tau`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{fit, gen_design_in_cell, EntryLaw, FitResult};
use crate::fixed_point::SystemSolution;
use crate::losses::LossModel;
use crate::noise::NoiseModel;

/// Sample mean, unbiased variance and the standard error of that variance.
pub fn variance_with_se(values: &[f64]) -> (f64, f64, f64) {
    let m = values.len() as f64;
    let mean = values.iter().sum::<f64>() / m;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0);
    let m4 = values.iter().map(|v| (v - mean).powi(4)).sum::<f64>() / m;
    let se = ((m4 - var * var * (m - 3.0) / (m - 1.0)) / m).max(0.0).sqrt();
    (mean, var, se)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceRow {
    pub n: usize,
    pub p: usize,
    pub kappa: f64,
    pub tau: f64,
    pub seeds: usize,
    pub mean_norm_sq: f64,
    pub var_norm_sq: f64,
    pub var_se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceSweep {
    pub rows: Vec<VarianceRow>,
    /// `var(n_k) / var(n_{k+1})` for consecutive sizes.
    pub ratios: Vec<f64>,
}

pub const MIN_SWEEP_SEEDS: usize = 10;

/// `p = round(kappa n)`, at least one.
pub fn predictors(n: usize, kappa: f64) -> Result<usize> {
    let p = (kappa * n as f64).round();
    if !(p >= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "kappa = {kappa}, n = {n} rounds to p = 0"
        )));
    }
    Ok(p as usize)
}

#[allow(clippy::too_many_arguments)]
pub fn variance_sweep(
    ns: &[usize],
    kappa: f64,
    tau: f64,
    loss: &LossModel,
    noise: &NoiseModel,
    entry_law: EntryLaw,
    seeds: &[u64],
) -> Result<VarianceSweep> {
    if seeds.len() < MIN_SWEEP_SEEDS {
        return Err(Error::InvalidArgument(format!(
            "variance sweep needs at least {MIN_SWEEP_SEEDS} seeds, got {}",
            seeds.len()
        )));
    }
    let mut ns = ns.to_vec();
    ns.sort_unstable();
    let mut rows = Vec::with_capacity(ns.len());
    for &n in &ns {
        let p = predictors(n, kappa)?;
        let norms = seeds
            .par_iter()
            .map(|&seed| {
                let d = gen_design_in_cell(n, p, entry_law, noise, seed, n as u64)?;
                Ok(fit(&d, loss, tau)?.beta_hat.norm_squared())
            })
            .collect::<Result<Vec<f64>>>()?;
        let (mean, var, se) = variance_with_se(&norms);
        rows.push(VarianceRow {
            n,
            p,
            kappa,
            tau,
            seeds: seeds.len(),
            mean_norm_sq: mean,
            var_norm_sq: var,
            var_se: se,
        });
    }
    let ratios = rows.windows(2).map(|w| w[0].var_norm_sq / w[1].var_norm_sq).collect();
    Ok(VarianceSweep { rows, ratios })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CtauSummary {
    pub count: usize,
    pub mean: f64,
    pub sd: f64,
    pub predicted: f64,
    pub abs_err: f64,
    pub rel_err: f64,
    pub rel_sd: f64,
}

pub fn c_tau_concentration(fits: &[FitResult], prediction: &SystemSolution) -> CtauSummary {
    let values: Vec<f64> = fits.iter().map(|f| f.c_tau).collect();
    let m = values.len() as f64;
    let mean = values.iter().sum::<f64>() / m;
    let sd = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0)).sqrt()
    } else {
        0.0
    };
    CtauSummary {
        count: values.len(),
        mean,
        sd,
        predicted: prediction.c,
        abs_err: (mean - prediction.c).abs(),
        rel_err: (mean - prediction.c).abs() / prediction.c,
        rel_sd: sd / mean,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SecondMoment {
    /// `(p/n) mean |beta_hat|^2`.
    pub lhs: f64,
    /// `mean over fits and i of (c_tau psi(R_i))^2`.
    pub rhs: f64,
    pub rel_gap: f64,
}

/// Sample form of `kappa r^2 = E[(c psi(prox_c(z)))^2]`.
pub fn second_moment_identity(fits: &[FitResult], loss: &LossModel) -> SecondMoment {
    let m = fits.len() as f64;
    let lhs = fits
        .iter()
        .map(|f| f.beta_hat.len() as f64 / f.residuals.len() as f64 * f.beta_hat.norm_squared())
        .sum::<f64>()
        / m;
    let rhs = fits
        .iter()
        .map(|f| {
            f.residuals
                .iter()
                .map(|&r| (f.c_tau * loss.psi(r)).powi(2))
                .sum::<f64>()
                / f.residuals.len() as f64
        })
        .sum::<f64>()
        / m;
    SecondMoment {
        lhs,
        rhs,
        rel_gap: (lhs - rhs).abs() / rhs,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimator::{gen_design, Design};
    use nalgebra::{DMatrix, DVector};

    #[test]
    fn zero_noise_has_zero_variance() {
        let seeds: Vec<u64> = (0..10).collect();
        let sweep = variance_sweep(
            &[40, 20],
            0.5,
            1.0,
            &LossModel::Quadratic,
            &NoiseModel::Empirical { values: vec![0.0] },
            EntryLaw::Gaussian,
            &seeds,
        )
        .unwrap();
        assert_eq!(sweep.rows[0].n, 20);
        assert!(sweep.rows.iter().all(|r| r.var_norm_sq == 0.0 && r.mean_norm_sq == 0.0));
        assert!(variance_sweep(
            &[20],
            0.5,
            1.0,
            &LossModel::Quadratic,
            &NoiseModel::gaussian(1.0),
            EntryLaw::Gaussian,
            &seeds[..3]
        )
        .is_err());
    }

    #[test]
    fn one_by_one_trace() {
        let loss = LossModel::smoothed_huber(1.345);
        let d = Design::from_parts(DMatrix::from_element(1, 1, 0.8), DVector::from_element(1, 1.5)).unwrap();
        let f = fit(&d, &loss, 0.5).unwrap();
        let expected = 1.0 / (loss.psi_prime(f.residuals[0]) * 0.64 + 0.5);
        assert!((f.c_tau - expected).abs() < 1e-14);
        let pred = SystemSolution {
            kappa: 1.0,
            tau: 0.5,
            r: 0.0,
            c: expected,
            eq1_residual: 0.0,
            eq2_residual: 0.0,
            iterations: 0,
        };
        let s = c_tau_concentration(std::slice::from_ref(&f), &pred);
        assert_eq!(s.abs_err, 0.0);
        assert_eq!(s.sd, 0.0);
    }

    #[test]
    fn variance_helper() {
        let (mean, var, se) = variance_with_se(&[1.0, 2.0, 3.0, 4.0]);
        assert!((mean - 2.5).abs() < 1e-15 && (var - 5.0 / 3.0).abs() < 1e-14 && se > 0.0);
        assert!(predictors(3, 0.1).is_err());
        assert_eq!(predictors(1000, 0.5).unwrap(), 500);
        let _ = gen_design(2, 1, EntryLaw::Gaussian, &NoiseModel::gaussian(1.0), 0).unwrap();
    }
}
