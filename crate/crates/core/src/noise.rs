//! Error laws and the expectation engine for `z = eps + r Z`.
//!
//! Expectations over the convolved variable are computed by deterministic
//! quadrature. Both parametric built-ins are closed under Gaussian
//! convolution, so the rule is built directly on the law of `z`:
//! Gauss-Hermite for Gaussian noise, and composite Simpson on the closed-form
//! density otherwise. Empirical laws use their atoms tensorized with a
//! Gauss-Hermite rule in the Gaussian direction.

use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::model_text::parse_model;
use crate::quadrature::{gaussian_rule, simpson, QuadratureRule};
use crate::rng;

/// Node counts for the expectation engine.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadratureSettings {
    pub hermite_nodes: usize,
    pub simpson_points: usize,
    /// Half-width of the Simpson grid in standard deviations of `z`, plus 30 Laplace scales.
    pub span_sd: f64,
}

impl Default for QuadratureSettings {
    fn default() -> Self {
        QuadratureSettings {
            hermite_nodes: 61,
            simpson_points: 4001,
            span_sd: 12.0,
        }
    }
}

impl QuadratureSettings {
    /// Same rule family with twice the nodes, for convergence checks.
    pub fn doubled(&self) -> Self {
        QuadratureSettings {
            hermite_nodes: 2 * self.hermite_nodes,
            simpson_points: 2 * self.simpson_points - 1,
            span_sd: self.span_sd,
        }
    }
}

/// Law of the regression errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum NoiseModel {
    Gaussian {
        sd: f64,
    },
    /// `scale * L + smoothing * Z` with `L` standard Laplace; symmetric and log-concave.
    LaplaceSmoothed {
        scale: f64,
        smoothing: f64,
    },
    /// Uniform distribution on a fixed set of atoms.
    Empirical {
        values: Vec<f64>,
    },
}

/// Bare names take unit scale; `laplace_smoothed` uses smoothing 0.1.
impl FromStr for NoiseModel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        parse_model("noise", s, |name| match name {
            "gaussian" => Some(NoiseModel::gaussian(1.0)),
            "laplace_smoothed" | "laplace" => Some(NoiseModel::laplace_smoothed(1.0, 0.1)),
            _ => None,
        })
        .and_then(|noise| noise.validate().map(|()| noise))
    }
}

fn norm_cdf(t: f64) -> f64 {
    0.5 * erfc(-t * FRAC_1_SQRT_2)
}

fn norm_pdf(t: f64) -> f64 {
    (-0.5 * t * t).exp() / (2.0 * PI).sqrt()
}

fn gauss_pdf(x: f64, sd: f64) -> f64 {
    norm_pdf(x / sd) / sd
}

fn weighted_simpson(a: f64, b: f64, points: usize, density: impl Fn(f64) -> f64) -> QuadratureRule {
    let mut rule = simpson(a, b, points);
    for (w, &x) in rule.weights.iter_mut().zip(&rule.nodes) {
        *w *= density(x);
    }
    rule
}

fn ln_norm_cdf(t: f64) -> f64 {
    if t > -30.0 {
        norm_cdf(t).ln()
    } else {
        // Mills-ratio asymptotic series.
        let t2 = t * t;
        let series = 1.0 - 1.0 / t2 + 3.0 / (t2 * t2) - 15.0 / (t2 * t2 * t2) + 105.0 / (t2 * t2 * t2 * t2);
        -0.5 * t2 - (2.0 * PI).sqrt().ln() - (-t).ln() + series.ln()
    }
}

/// `exp(a) * Phi(t)` without intermediate overflow or underflow.
fn exp_norm_cdf(a: f64, t: f64) -> f64 {
    (a + ln_norm_cdf(t)).exp()
}

fn laplace_gauss_pdf(x: f64, b: f64, s: f64) -> f64 {
    if s == 0.0 {
        return (-x.abs() / b).exp() / (2.0 * b);
    }
    let a = s * s / (2.0 * b * b);
    (exp_norm_cdf(a - x / b, x / s - s / b) + exp_norm_cdf(a + x / b, -x / s - s / b)) / (2.0 * b)
}

// Upper tail P(X > y) for y >= 0; every term is small or positive there.
fn laplace_gauss_sf(y: f64, b: f64, s: f64) -> f64 {
    if s == 0.0 {
        return 0.5 * (-y / b).exp();
    }
    let a = s * s / (2.0 * b * b);
    norm_cdf(-y / s) + 0.5 * exp_norm_cdf(a - y / b, y / s - s / b) - 0.5 * exp_norm_cdf(a + y / b, -y / s - s / b)
}

fn laplace_gauss_cdf(x: f64, b: f64, s: f64) -> f64 {
    if x < 0.0 {
        laplace_gauss_sf(-x, b, s)
    } else {
        1.0 - laplace_gauss_sf(x, b, s)
    }
}

fn double_factorial_odd(m: u32) -> f64 {
    // (m - 1)!! for even m
    (1..m).step_by(2).map(f64::from).product()
}

fn factorial(m: u32) -> f64 {
    (1..=m).map(f64::from).product()
}

fn binomial(n: u32, k: u32) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * f64::from(n - i) / f64::from(i + 1))
}

impl NoiseModel {
    pub fn gaussian(sd: f64) -> Self {
        NoiseModel::Gaussian { sd }
    }

    pub fn laplace_smoothed(scale: f64, smoothing: f64) -> Self {
        NoiseModel::LaplaceSmoothed { scale, smoothing }
    }

    pub fn name(&self) -> String {
        match self {
            NoiseModel::Gaussian { sd } => format!("gaussian(sd={sd})"),
            NoiseModel::LaplaceSmoothed { scale, smoothing } => {
                format!("laplace_smoothed(scale={scale}, smoothing={smoothing})")
            }
            NoiseModel::Empirical { values } => format!("empirical({} atoms)", values.len()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        match self {
            NoiseModel::Gaussian { sd } if !(sd.is_finite() && *sd > 0.0) => {
                bad(format!("gaussian sd must be finite and > 0, got {sd}"))
            }
            NoiseModel::LaplaceSmoothed { scale, smoothing }
                if !(scale.is_finite() && *scale > 0.0 && smoothing.is_finite() && *smoothing >= 0.0) =>
            {
                bad(format!(
                    "laplace_smoothed needs scale > 0 and smoothing >= 0, got {scale}, {smoothing}"
                ))
            }
            NoiseModel::Empirical { values } if values.is_empty() || values.iter().any(|v| !v.is_finite()) => {
                bad("empirical law needs a non-empty set of finite atoms".to_string())
            }
            _ => Ok(()),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, count: usize) -> Vec<f64> {
        match self {
            NoiseModel::Gaussian { sd } => (0..count)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(rng);
                    sd * z
                })
                .collect(),
            NoiseModel::LaplaceSmoothed { scale, smoothing } => (0..count)
                .map(|_| {
                    let e: f64 = Exp1.sample(rng);
                    let l = if rng.random::<bool>() { e } else { -e };
                    let z: f64 = StandardNormal.sample(rng);
                    scale * l + smoothing * z
                })
                .collect(),
            NoiseModel::Empirical { values } => (0..count).map(|_| values[rng.random_range(0..values.len())]).collect(),
        }
    }

    /// Density of the error law, when it has one.
    pub fn density(&self, x: f64) -> Option<f64> {
        self.convolved(0.0).density(x)
    }

    /// `E|eps|^k` for even `k`.
    pub fn moment(&self, k: u32) -> Result<f64> {
        if !k.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!("moment order must be even, got {k}")));
        }
        Ok(match self {
            NoiseModel::Gaussian { sd } => sd.powi(k as i32) * double_factorial_odd(k),
            NoiseModel::LaplaceSmoothed { scale, smoothing } => (0..=k)
                .step_by(2)
                .map(|j| {
                    binomial(k, j)
                        * scale.powi(j as i32)
                        * factorial(j)
                        * smoothing.powi((k - j) as i32)
                        * double_factorial_odd(k - j)
                })
                .sum(),
            NoiseModel::Empirical { values } => {
                values.iter().map(|v| v.abs().powi(k as i32)).sum::<f64>() / values.len() as f64
            }
        })
    }

    pub fn variance(&self) -> f64 {
        self.moment(2).expect("2 is even")
    }

    pub fn convolved(&self, r: f64) -> ConvolvedLaw {
        ConvolvedLaw::new(self.clone(), r)
    }
}

/// The law of `eps + r Z` with `Z ~ N(0, 1)` independent of `eps`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvolvedLaw {
    pub base: NoiseModel,
    pub r: f64,
}

impl ConvolvedLaw {
    pub fn new(base: NoiseModel, r: f64) -> Self {
        assert!(
            r.is_finite() && r >= 0.0,
            "Gaussian widening r must be finite and >= 0, got {r}"
        );
        ConvolvedLaw { base, r }
    }

    pub fn variance(&self) -> f64 {
        self.base.variance() + self.r * self.r
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, count: usize) -> Vec<f64> {
        let mut out = self.base.sample(rng, count);
        if self.r > 0.0 {
            for v in &mut out {
                let z: f64 = StandardNormal.sample(rng);
                *v += self.r * z;
            }
        }
        out
    }

    pub fn density(&self, x: f64) -> Option<f64> {
        match &self.base {
            NoiseModel::Gaussian { sd } => {
                let s = sd.hypot(self.r);
                Some(norm_pdf(x / s) / s)
            }
            NoiseModel::LaplaceSmoothed { scale, smoothing } => {
                Some(laplace_gauss_pdf(x, *scale, smoothing.hypot(self.r)))
            }
            NoiseModel::Empirical { values } if self.r > 0.0 => {
                Some(values.iter().map(|v| norm_pdf((x - v) / self.r)).sum::<f64>() / (values.len() as f64 * self.r))
            }
            NoiseModel::Empirical { .. } => None,
        }
    }

    pub fn cdf(&self, x: f64) -> Option<f64> {
        match &self.base {
            NoiseModel::Gaussian { sd } => Some(norm_cdf(x / sd.hypot(self.r))),
            NoiseModel::LaplaceSmoothed { scale, smoothing } => {
                Some(laplace_gauss_cdf(x, *scale, smoothing.hypot(self.r)))
            }
            NoiseModel::Empirical { values } if self.r > 0.0 => {
                Some(values.iter().map(|v| norm_cdf((x - v) / self.r)).sum::<f64>() / values.len() as f64)
            }
            NoiseModel::Empirical { .. } => None,
        }
    }

    /// Quadrature rule integrating against the law of `z`.
    pub fn quadrature_rule(&self, settings: &QuadratureSettings) -> Result<QuadratureRule> {
        self.quadrature_rule_resolving(settings, None)
    }

    /// Like [`quadrature_rule`](Self::quadrature_rule), but Gaussian components fall back to a
    /// Simpson grid when Hermite nodes would be too sparse to resolve features of width `scale`.
    pub fn quadrature_rule_resolving(
        &self,
        settings: &QuadratureSettings,
        scale: Option<f64>,
    ) -> Result<QuadratureRule> {
        // Hermite node spacing near the center is about pi sd / sqrt(n).
        let too_coarse = |sd: f64| scale.is_some_and(|s| PI * sd / (settings.hermite_nodes as f64).sqrt() > 0.5 * s);
        match &self.base {
            NoiseModel::Gaussian { sd } => {
                let s = sd.hypot(self.r);
                if too_coarse(s) {
                    let half = settings.span_sd * s;
                    Ok(weighted_simpson(-half, half, settings.simpson_points, |x| {
                        gauss_pdf(x, s)
                    }))
                } else {
                    Ok(gaussian_rule(settings.hermite_nodes, s))
                }
            }
            NoiseModel::LaplaceSmoothed { scale, smoothing } => {
                let s = smoothing.hypot(self.r);
                // Exponential tails need extra room beyond a fixed number of sds.
                let half = settings.span_sd * self.variance().sqrt() + 30.0 * scale;
                Ok(weighted_simpson(-half, half, settings.simpson_points, |x| {
                    laplace_gauss_pdf(x, *scale, s)
                }))
            }
            NoiseModel::Empirical { values } => {
                let m = values.len() as f64;
                if self.r == 0.0 {
                    return Ok(QuadratureRule {
                        nodes: values.clone(),
                        weights: vec![1.0 / m; values.len()],
                    });
                }
                if too_coarse(self.r) {
                    let lo = values.iter().copied().fold(f64::INFINITY, f64::min) - settings.span_sd * self.r;
                    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max) + settings.span_sd * self.r;
                    let points = settings
                        .simpson_points
                        .max(2 * ((hi - lo) / (0.005 * self.r)) as usize + 1);
                    let mixture = |x: f64| values.iter().map(|v| gauss_pdf(x - v, self.r)).sum::<f64>() / m;
                    return Ok(weighted_simpson(lo, hi, points.min(400_001), mixture));
                }
                let gh = gaussian_rule(settings.hermite_nodes, self.r);
                let mut rule = QuadratureRule {
                    nodes: Vec::with_capacity(values.len() * gh.len()),
                    weights: Vec::with_capacity(values.len() * gh.len()),
                };
                for &v in values {
                    for (&z, &w) in gh.nodes.iter().zip(&gh.weights) {
                        rule.nodes.push(v + z);
                        rule.weights.push(w / m);
                    }
                }
                Ok(rule)
            }
        }
    }

    /// Quadrature expectation; exact to rounding only for smooth `g`, since kinks defeat Gauss-Hermite.
    pub fn expect<G: FnMut(f64) -> f64>(&self, g: G) -> Result<f64> {
        self.expect_with(&QuadratureSettings::default(), g)
    }

    pub fn expect_with<G: FnMut(f64) -> f64>(&self, settings: &QuadratureSettings, g: G) -> Result<f64> {
        Ok(self.quadrature_rule(settings)?.integrate(g))
    }

    /// Seeded Monte Carlo estimate of `E[g(z)]`, returned as `(mean, std_error)`.
    pub fn expect_mc<G: FnMut(f64) -> f64>(&self, mut g: G, n_samples: usize, seed: u64) -> Result<(f64, f64)> {
        if n_samples < 2 {
            return Err(Error::InvalidArgument("expect_mc needs at least 2 samples".into()));
        }
        let mut rng = rng::stream(seed, 0, rng::tag::MONTE_CARLO);
        // Welford accumulation over batches keeps memory bounded.
        let (mut mean, mut m2, mut count) = (0.0f64, 0.0f64, 0usize);
        let mut remaining = n_samples;
        while remaining > 0 {
            let batch = remaining.min(1 << 16);
            for z in self.sample(&mut rng, batch) {
                let v = g(z);
                count += 1;
                let d = v - mean;
                mean += d / count as f64;
                m2 += d * (v - mean);
            }
            remaining -= batch;
        }
        let var = m2 / (count - 1) as f64;
        Ok((mean, (var / count as f64).sqrt()))
    }
}

impl std::fmt::Display for NoiseModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.name())
    }
}
