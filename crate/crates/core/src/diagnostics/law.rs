//! Goodness of fit of pooled residuals against `prox_c(eps + r Z)`.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::estimator::FitResult;
use crate::fixed_point::SystemSolution;
use crate::losses::{prox, LossModel};
use crate::noise::{ConvolvedLaw, NoiseModel};
use crate::rng::{stream, tag};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KsMethod {
    /// Exact predicted CDF at every data point.
    Analytic,
    /// Against a Monte Carlo sample of the predicted law.
    TwoSample,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LawCheck {
    pub ks: f64,
    pub samples: usize,
    pub method: KsMethod,
    /// Asymptotic 5% critical value `1.358 / sqrt(N)` for independent samples.
    pub critical_95: f64,
    pub mean_abs_observed: f64,
    pub mean_abs_predicted: f64,
    pub second_moment_observed: f64,
    pub second_moment_predicted: f64,
}

/// `P(prox_c(z) <= t) = P(z <= t + c psi(t))`, since the prox is increasing.
pub fn predicted_residual_cdf(law: &ConvolvedLaw, loss: &LossModel, c: f64, t: f64) -> Option<f64> {
    law.cdf(t + c * loss.psi(t))
}

/// Sup distance between the empirical CDF of `sorted` and `cdf`.
pub fn ks_statistic<F: FnMut(f64) -> f64>(sorted: &[f64], mut cdf: F) -> f64 {
    let m = sorted.len() as f64;
    sorted.iter().enumerate().fold(0.0, |d, (i, &x)| {
        let f = cdf(x);
        d.max(f - i as f64 / m).max((i + 1) as f64 / m - f)
    })
}

pub fn ks_two_sample(a: &[f64], b: &[f64]) -> f64 {
    let (mut a, mut b) = (a.to_vec(), b.to_vec());
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut d) = (0usize, 0usize, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}

const FALLBACK_SAMPLES: usize = 50_000;

pub fn residual_law_check(
    fits: &[FitResult],
    prediction: &SystemSolution,
    loss: &LossModel,
    noise: &NoiseModel,
) -> Result<LawCheck> {
    let mut pooled: Vec<f64> = fits.iter().flat_map(|f| f.residuals.iter().copied()).collect();
    pooled.sort_by(f64::total_cmp);
    let law = noise.convolved(prediction.r);
    let c = prediction.c;
    let m = pooled.len() as f64;

    let (ks, method) = if law.cdf(0.0).is_some() {
        let ks = ks_statistic(&pooled, |t| {
            predicted_residual_cdf(&law, loss, c, t).unwrap_or(f64::NAN)
        });
        (ks, KsMethod::Analytic)
    } else {
        let mut rng = stream(0, 0, tag::MONTE_CARLO);
        let draws = law
            .sample(&mut rng, FALLBACK_SAMPLES)
            .into_iter()
            .map(|z| prox(loss, c, z).map(|p| p.y))
            .collect::<Result<Vec<_>>>()?;
        (ks_two_sample(&pooled, &draws), KsMethod::TwoSample)
    };

    let mean_abs_predicted = law.expect(|z| prox(loss, c, z).map_or(f64::NAN, |p| p.y.abs()))?;
    let second_moment_predicted = law.expect(|z| prox(loss, c, z).map_or(f64::NAN, |p| p.y * p.y))?;
    Ok(LawCheck {
        ks,
        samples: pooled.len(),
        method,
        critical_95: 1.358 / m.sqrt(),
        mean_abs_observed: pooled.iter().map(|r| r.abs()).sum::<f64>() / m,
        mean_abs_predicted,
        second_moment_observed: pooled.iter().map(|r| r * r).sum::<f64>() / m,
        second_moment_predicted,
    })
}
