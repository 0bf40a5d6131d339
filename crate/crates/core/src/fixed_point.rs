//! The asymptotic `(r, c)` system.
//!
//! With `z = eps + r Z`, the pair `(r, c)` solves
//!
//! ```text
//! E[prox_c'(z)]            = 1 - kappa + tau c
//! kappa r^2                = E[(z - prox_c(z))^2]
//! ```
//!
//! For fixed `r` the first line is a scalar equation `delta(c) = 0` whose
//! left side is strictly decreasing in `c` and changes sign on
//! `[0, kappa / tau + 1]`. The solver nests an exact bracketed root find for
//! `c` inside a damped, secant-accelerated iteration on `r^2`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{prox, LossModel};
use crate::noise::{ConvolvedLaw, NoiseModel, QuadratureSettings};
use crate::quadrature::QuadratureRule;

/// Prediction for `(kappa, tau, loss, noise)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemSolution {
    pub kappa: f64,
    pub tau: f64,
    /// Limit of `||beta_hat||`.
    pub r: f64,
    /// Limit of `c_tau = tr((S + tau I)^-1) / n`.
    pub c: f64,
    /// `E[prox_c'(z)] - (1 - kappa + tau c)`.
    pub eq1_residual: f64,
    /// `kappa r^2 - E[(z - prox_c(z))^2]`.
    pub eq2_residual: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    pub quadrature: QuadratureSettings,
    /// Weight of the new value in the damped update of `r^2`.
    pub damping: f64,
    pub max_outer: usize,
    /// Acceptance tolerance for both equations (relative to `1 + r^2` for the second).
    pub tolerance: f64,
    /// Iterates are pushed well below `tolerance` when cheap to do so.
    pub target: f64,
    /// Overrides the default starting radius.
    pub initial_r: Option<f64>,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            quadrature: QuadratureSettings::default(),
            damping: 0.5,
            max_outer: 500,
            tolerance: 1e-9,
            target: 1e-12,
            initial_r: None,
        }
    }
}

/// Inner tolerance on `|delta(c)|`.
pub const DELTA_TOLERANCE: f64 = 1e-11;
const INNER_MAX_ITER: usize = 300;

fn check_kappa_tau(kappa: f64, tau: f64) -> Result<()> {
    if !(kappa.is_finite() && kappa > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "kappa must be finite and > 0, got {kappa}"
        )));
    }
    if !(tau.is_finite() && tau > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "tau must be finite and > 0, got {tau}; use solve_tau_limit for the unpenalized case"
        )));
    }
    Ok(())
}

fn delta_on_rule(kappa: f64, tau: f64, loss: &LossModel, rule: &QuadratureRule, x: f64) -> Result<f64> {
    let mean_slope = rule.try_integrate(|z| prox(loss, x, z).map(|p| p.dpdx))?;
    Ok(kappa - tau * x - 1.0 + mean_slope)
}

/// `kappa - tau x - 1 + E[prox_x'(z)]`.
pub fn delta(kappa: f64, tau: f64, loss: &LossModel, law: &ConvolvedLaw, x: f64) -> Result<f64> {
    delta_with(kappa, tau, loss, law, x, &QuadratureSettings::default())
}

pub fn delta_with(
    kappa: f64,
    tau: f64,
    loss: &LossModel,
    law: &ConvolvedLaw,
    x: f64,
    settings: &QuadratureSettings,
) -> Result<f64> {
    if !(x >= 0.0) {
        return Err(Error::InvalidArgument(format!("delta is defined for x >= 0, got {x}")));
    }
    delta_on_rule(
        kappa,
        tau,
        loss,
        &law.quadrature_rule_resolving(settings, loss.length_scale())?,
        x,
    )
}

/// Bracketed root of a decreasing function by Illinois-modified regula falsi.
///
/// Stops once `|f| <= ftol` or the bracket has collapsed to rounding level.
pub(crate) fn bracketed_root<F>(mut f: F, mut lo: f64, mut hi: f64, ftol: f64) -> Result<(f64, f64)>
where
    F: FnMut(f64) -> Result<f64>,
{
    let (mut f_lo, mut f_hi) = (f(lo)?, f(hi)?);
    if f_lo == 0.0 {
        return Ok((lo, 0.0));
    }
    if f_hi == 0.0 {
        return Ok((hi, 0.0));
    }
    if f_lo.signum() == f_hi.signum() {
        return Err(Error::BracketFailure { lo, hi, f_lo, f_hi });
    }
    let mut side = 0i8;
    let mut best = if f_lo.abs() < f_hi.abs() {
        (lo, f_lo)
    } else {
        (hi, f_hi)
    };
    for it in 0..INNER_MAX_ITER {
        let mut x = (lo * f_hi - hi * f_lo) / (f_hi - f_lo);
        // Plain bisection every few steps guards against slow one-sided progress.
        if !(x > lo && x < hi) || it % 8 == 7 {
            x = 0.5 * (lo + hi);
        }
        let fx = f(x)?;
        if fx.abs() < best.1.abs() {
            best = (x, fx);
        }
        if fx.abs() <= ftol || hi - lo <= 4.0 * f64::EPSILON * hi.abs().max(1e-300) {
            return Ok(best);
        }
        if fx.signum() == f_lo.signum() {
            lo = x;
            f_lo = fx;
            if side == -1 {
                f_hi *= 0.5;
            }
            side = -1;
        } else {
            hi = x;
            f_hi = fx;
            if side == 1 {
                f_lo *= 0.5;
            }
            side = 1;
        }
    }
    if best.1.abs() <= ftol.max(DELTA_TOLERANCE) {
        Ok(best)
    } else {
        Err(Error::ConvergenceFailure {
            iterations: INNER_MAX_ITER,
            residual: best.1,
        })
    }
}

fn solve_c_on_rule(kappa: f64, tau: f64, loss: &LossModel, rule: &QuadratureRule) -> Result<(f64, f64)> {
    let hi = kappa / tau + 1.0;
    // Aim below the contract tolerance so that c carries no visible error into r.
    let (c, res) = bracketed_root(|x| delta_on_rule(kappa, tau, loss, rule, x), 0.0, hi, 1e-14)?;
    if res.abs() > DELTA_TOLERANCE {
        return Err(Error::ConvergenceFailure {
            iterations: INNER_MAX_ITER,
            residual: res,
        });
    }
    Ok((c, res))
}

/// Root in `c` of the first equation, for the law of `z` held fixed.
pub fn solve_c_given_r(kappa: f64, tau: f64, loss: &LossModel, law: &ConvolvedLaw) -> Result<f64> {
    check_kappa_tau(kappa, tau)?;
    let rule = law.quadrature_rule_resolving(&QuadratureSettings::default(), loss.length_scale())?;
    solve_c_on_rule(kappa, tau, loss, &rule).map(|(c, _)| c)
}

struct Evaluation {
    c: f64,
    eq1: f64,
    /// `E[(z - prox_c(z))^2] / kappa`.
    update: f64,
}

fn evaluate(
    kappa: f64,
    tau: f64,
    loss: &LossModel,
    noise: &NoiseModel,
    r2: f64,
    opts: &SolverOptions,
) -> Result<Evaluation> {
    let law = noise.convolved(r2.max(0.0).sqrt());
    let rule = law.quadrature_rule_resolving(&opts.quadrature, loss.length_scale())?;
    let (c, eq1) = solve_c_on_rule(kappa, tau, loss, &rule)?;
    let second = rule.try_integrate(|z| {
        let y = prox(loss, c, z)?.y;
        Ok::<_, Error>((z - y) * (z - y))
    })?;
    Ok(Evaluation {
        c,
        eq1,
        update: second / kappa,
    })
}

/// Starting radius: exact for the quadratic loss at `tau = 0`.
fn initial_r2(kappa: f64, noise: &NoiseModel) -> f64 {
    let guess = if kappa < 1.0 {
        (kappa * noise.variance() / (1.0 - kappa)).sqrt()
    } else {
        10.0
    };
    guess.clamp(1e-3, 10.0).powi(2)
}

pub fn solve_system(kappa: f64, tau: f64, loss: &LossModel, noise: &NoiseModel) -> Result<SystemSolution> {
    solve_system_with(kappa, tau, loss, noise, &SolverOptions::default())
}

pub fn solve_system_with(
    kappa: f64,
    tau: f64,
    loss: &LossModel,
    noise: &NoiseModel,
    opts: &SolverOptions,
) -> Result<SystemSolution> {
    check_kappa_tau(kappa, tau)?;
    loss.validate()?;
    noise.validate()?;
    let theta = opts.damping;
    let mut s = opts.initial_r.map_or_else(|| initial_r2(kappa, noise), |r| r * r);
    // h(s) = update(s) - s is nonnegative at s = 0.
    let (mut lo, mut hi) = (0.0f64, f64::INFINITY);
    let mut prev: Option<(f64, f64)> = None;
    let mut sign_flips = 0usize;
    let mut trace = Vec::new();

    for it in 1..=opts.max_outer {
        let ev = evaluate(kappa, tau, loss, noise, s, opts)?;
        if !(ev.c.is_finite() && ev.update.is_finite()) {
            return Err(Error::NonFiniteIterate(it));
        }
        trace.push((s.sqrt(), ev.c));
        let h = ev.update - s;
        let eq2 = -kappa * h;
        let accept = |tol: f64| eq2.abs() <= tol * (1.0 + s) && ev.eq1.abs() <= opts.tolerance;
        let stalled = prev.is_some_and(|(sp, _)| (s - sp).abs() <= 1e-15 * (1.0 + s));
        if accept(opts.target) || (stalled && accept(opts.tolerance)) {
            return Ok(SystemSolution {
                kappa,
                tau,
                r: s.sqrt(),
                c: ev.c,
                eq1_residual: ev.eq1,
                eq2_residual: eq2,
                iterations: it,
            });
        }
        if h > 0.0 {
            lo = lo.max(s);
        } else {
            hi = hi.min(s);
        }
        if let Some((_, hp)) = prev {
            if hp.signum() != h.signum() {
                sign_flips += 1;
            }
        }
        let mut next = s + theta * h;
        if let Some((sp, hp)) = prev {
            if h != hp {
                let secant = s - h * (s - sp) / (h - hp);
                if secant.is_finite() && secant > lo && secant < hi {
                    next = secant;
                }
            }
        }
        if hi.is_finite() && (sign_flips >= 3 || !(next > lo && next < hi)) {
            next = 0.5 * (lo + hi);
        }
        if !(next >= 0.0) || !next.is_finite() {
            return Err(Error::NonFiniteIterate(it));
        }
        prev = Some((s, h));
        s = next;
    }
    Err(Error::NoConvergence { trace })
}

/// Solutions along a decreasing `tau` grid with extrapolation to `tau = 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TauLimit {
    pub r0: f64,
    pub c0: f64,
    pub table: Vec<SystemSolution>,
    /// Successive extrapolated values of `r(0)` as the grid is refined.
    pub r0_estimates: Vec<f64>,
    /// Whether `r` increases monotonically as `tau` decreases.
    pub r_monotone: bool,
}

/// Polynomial extrapolation to `t = 0` through the given points (Neville).
pub fn extrapolate_to_zero(points: &[(f64, f64)]) -> f64 {
    let mut p: Vec<f64> = points.iter().map(|&(_, y)| y).collect();
    let t: Vec<f64> = points.iter().map(|&(t, _)| t).collect();
    let n = p.len();
    for m in 1..n {
        for i in 0..n - m {
            p[i] = (t[i + m] * p[i] - t[i] * p[i + 1]) / (t[i + m] - t[i]);
        }
    }
    p[0]
}

/// Extrapolation through the (up to) three smallest-`tau` points.
pub(crate) fn richardson(points: &[(f64, f64)]) -> f64 {
    let k = points.len().min(3);
    extrapolate_to_zero(&points[points.len() - k..])
}

pub fn solve_tau_limit(kappa: f64, loss: &LossModel, noise: &NoiseModel, tau_grid: &[f64]) -> Result<TauLimit> {
    if !(kappa > 0.0 && kappa < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "the unpenalized limit needs 0 < kappa < 1, got {kappa}"
        )));
    }
    if loss.strong_convexity() <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "{} is not strongly convex",
            loss.name()
        )));
    }
    if tau_grid.is_empty() || tau_grid.windows(2).any(|w| !(w[1] < w[0])) || tau_grid.iter().any(|&t| !(t > 0.0)) {
        return Err(Error::InvalidArgument(
            "tau grid must be positive and strictly decreasing".into(),
        ));
    }
    let mut table = Vec::with_capacity(tau_grid.len());
    let mut opts = SolverOptions::default();
    for &tau in tau_grid {
        let sol = solve_system_with(kappa, tau, loss, noise, &opts)?;
        opts.initial_r = Some(sol.r);
        table.push(sol);
    }
    let r_pts: Vec<(f64, f64)> = table.iter().map(|s| (s.tau, s.r)).collect();
    let c_pts: Vec<(f64, f64)> = table.iter().map(|s| (s.tau, s.c)).collect();
    let r0_estimates: Vec<f64> = (2..=r_pts.len()).map(|k| richardson(&r_pts[..k])).collect();
    Ok(TauLimit {
        r0: if table.len() == 1 {
            table[0].r
        } else {
            richardson(&r_pts)
        },
        c0: if table.len() == 1 {
            table[0].c
        } else {
            richardson(&c_pts)
        },
        r_monotone: table.windows(2).all(|w| w[1].r >= w[0].r),
        r0_estimates,
        table,
    })
}

/// Finite-sample analogue of `delta` built from leave-one-out residuals:
/// `p/n - tau x - 1 + mean_i 1 / (1 + x psi'(prox_x(r_i)))`.
pub fn empirical_delta(p_over_n: f64, tau: f64, loss: &LossModel, residuals: &[f64], x: f64) -> Result<f64> {
    let mut acc = 0.0;
    for &r in residuals {
        acc += prox(loss, x, r)?.dpdx;
    }
    Ok(p_over_n - tau * x - 1.0 + acc / residuals.len() as f64)
}

/// Root of [`empirical_delta`].
pub fn empirical_root(p_over_n: f64, tau: f64, loss: &LossModel, residuals: &[f64]) -> Result<f64> {
    check_kappa_tau(p_over_n, tau)?;
    if residuals.is_empty() {
        return Err(Error::InvalidArgument("empirical root needs residuals".into()));
    }
    bracketed_root(
        |x| empirical_delta(p_over_n, tau, loss, residuals, x),
        0.0,
        p_over_n / tau + 1.0,
        1e-13,
    )
    .map(|(x, _)| x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    const HUBER: LossModel = LossModel::SmoothedHuber { k: 1.345 };

    /// Closed-form quadratic-loss solution: c from the quadratic formula, then
    /// r^2 = A sigma^2 / (kappa - A) with A = (c / (1 + c))^2.
    fn quadratic_oracle(kappa: f64, tau: f64, sigma: f64) -> (f64, f64) {
        let b = 1.0 - kappa + tau;
        let c = (-b + (b * b + 4.0 * tau * kappa).sqrt()) / (2.0 * tau);
        let a = (c / (1.0 + c)).powi(2);
        (c, (a * sigma * sigma / (kappa - a)).sqrt())
    }

    #[test]
    fn delta_at_zero_is_kappa() {
        let law = NoiseModel::gaussian(1.0).convolved(0.7);
        for loss in crate::losses::loss_catalog() {
            assert_relative_eq!(delta(0.37, 0.2, &loss, &law, 0.0).unwrap(), 0.37, epsilon = 1e-13);
        }
    }

    #[test]
    fn delta_quadratic_closed_form() {
        let law = NoiseModel::gaussian(1.0).convolved(0.3);
        let root = 0.741_657_386_773_941_6;
        for &x in &[0.0, 0.3, root, 2.0] {
            let expected = 0.5 - 0.1 * x - 1.0 + 1.0 / (1.0 + x);
            assert_relative_eq!(
                delta(0.5, 0.1, &LossModel::Quadratic, &law, x).unwrap(),
                expected,
                epsilon = 1e-13
            );
        }
        assert!(delta(0.5, 0.1, &LossModel::Quadratic, &law, root).unwrap().abs() < 1e-13);
    }

    #[test]
    fn delta_negative_far_out() {
        let law = NoiseModel::gaussian(1.0).convolved(0.7);
        assert!(delta(0.3, 0.5, &HUBER, &law, 10.0 * 0.3 / 0.5).unwrap() < 0.0);
        assert!(delta(0.3, 0.5, &HUBER, &law, -1.0).is_err());
    }

    #[test]
    fn solve_c_quadratic() {
        let law = NoiseModel::gaussian(1.0).convolved(0.2);
        let c = solve_c_given_r(0.5, 0.1, &LossModel::Quadratic, &law).unwrap();
        assert_relative_eq!(c, 0.741_657_386_773_941_6, epsilon = 1e-12);
        let c = solve_c_given_r(0.5, 1e6, &LossModel::Quadratic, &law).unwrap();
        assert!(c.abs() < 1e-6);
    }

    #[test]
    fn solve_c_huber_has_single_sign_change() {
        let law = NoiseModel::gaussian(1.0).convolved(0.7);
        let c = solve_c_given_r(0.3, 0.5, &HUBER, &law).unwrap();
        assert!(delta(0.3, 0.5, &HUBER, &law, c).unwrap().abs() <= DELTA_TOLERANCE);
        // Dense scan: exactly one sign change on the bracket, next to c.
        let hi = 0.3 / 0.5 + 1.0;
        let vals: Vec<f64> = (0..=400)
            .map(|i| delta(0.3, 0.5, &HUBER, &law, hi * i as f64 / 400.0).unwrap())
            .collect();
        let changes: Vec<usize> = (1..vals.len())
            .filter(|&i| vals[i - 1] > 0.0 && vals[i] <= 0.0)
            .collect();
        assert_eq!(changes.len(), 1);
        let i = changes[0];
        assert!(hi * (i - 1) as f64 / 400.0 <= c && c <= hi * i as f64 / 400.0);
    }

    #[test]
    fn solve_system_quadratic_matches_oracle() {
        let sol = solve_system(0.5, 0.1, &LossModel::Quadratic, &NoiseModel::gaussian(1.0)).unwrap();
        assert_relative_eq!(sol.c, 0.741_657_386_773_941_6, epsilon = 1e-10);
        assert_relative_eq!(sol.r * sol.r, 0.569_044_967_649_697_9, epsilon = 1e-9);
        let (c, r) = quadratic_oracle(0.5, 0.1, 1.0);
        assert_relative_eq!(sol.c, c, epsilon = 1e-12);
        assert_relative_eq!(sol.r, r, epsilon = 1e-10);
    }

    #[test]
    fn small_kappa_risk_vanishes() {
        let sol = solve_system(0.01, 0.1, &LossModel::Quadratic, &NoiseModel::gaussian(1.0)).unwrap();
        assert!(sol.r * sol.r < 0.05);
        assert!((sol.r * sol.r - 0.008_319_3).abs() < 1e-7);
        let (_, r) = quadratic_oracle(0.01, 0.1, 1.0);
        assert_relative_eq!(sol.r, r, max_relative = 1e-9);
    }

    #[test]
    fn near_zero_noise_gives_small_r() {
        for loss in crate::losses::loss_catalog() {
            let sol = solve_system(0.5, 1.0, &loss, &NoiseModel::gaussian(1e-4)).unwrap();
            assert!(sol.r <= 1e-2, "{}: r = {}", loss.name(), sol.r);
        }
    }

    #[test]
    fn rejects_unpenalized() {
        assert!(matches!(
            solve_system(0.5, 0.0, &HUBER, &NoiseModel::gaussian(1.0)),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn solution_satisfies_both_equations() {
        for noise in [NoiseModel::gaussian(1.0), NoiseModel::laplace_smoothed(1.0, 0.5)] {
            let sol = solve_system(0.5, 1.0, &HUBER, &noise).unwrap();
            let law = noise.convolved(sol.r);
            let e1 = law.expect(|z| prox(&HUBER, sol.c, z).unwrap().dpdx).unwrap();
            assert!((e1 - (1.0 - 0.5 + sol.c)).abs() <= 1e-9);
            let e2 = law
                .expect(|z| {
                    let y = prox(&HUBER, sol.c, z).unwrap().y;
                    (z - y) * (z - y)
                })
                .unwrap();
            assert!((0.5 * sol.r * sol.r - e2).abs() <= 1e-9 * (1.0 + sol.r * sol.r));
            assert!(sol.c >= 0.0 && sol.c <= 0.5 / 1.0);
        }
    }

    #[test]
    fn perturbed_start_returns_same_solution() {
        let noise = NoiseModel::gaussian(1.0);
        let base = solve_system(0.5, 1.0, &HUBER, &noise).unwrap();
        let opts = SolverOptions {
            initial_r: Some(1.5 * base.r),
            ..SolverOptions::default()
        };
        let other = solve_system_with(0.5, 1.0, &HUBER, &noise, &opts).unwrap();
        assert!((base.r - other.r).abs() < 1e-8);
        assert!((base.c - other.c).abs() < 1e-8);
    }

    #[test]
    fn tau_limit_quadratic_matches_ridgeless() {
        let grid = [1.0, 0.5, 0.1, 0.05, 0.01, 0.005, 0.001];
        let lim = solve_tau_limit(0.5, &LossModel::Quadratic, &NoiseModel::gaussian(1.0), &grid).unwrap();
        assert!(lim.r_monotone);
        assert!((lim.r0 * lim.r0 - 1.0).abs() < 0.02);
        // The ridgeless c solves 1 / (1 + c) = 1 - kappa.
        assert!((lim.c0 - 1.0).abs() < 0.01);
    }

    #[test]
    fn tau_limit_single_point() {
        let lim = solve_tau_limit(0.5, &LossModel::Quadratic, &NoiseModel::gaussian(1.0), &[0.3]).unwrap();
        assert_eq!(lim.table.len(), 1);
        assert_eq!(lim.r0, lim.table[0].r);
        assert!(lim.r0_estimates.is_empty());
    }

    #[test]
    fn tau_limit_requires_strong_convexity_and_decreasing_grid() {
        let n = NoiseModel::gaussian(1.0);
        assert!(solve_tau_limit(0.5, &HUBER, &n, &[1.0, 0.1]).is_err());
        assert!(solve_tau_limit(0.5, &LossModel::Quadratic, &n, &[0.1, 1.0]).is_err());
        assert!(solve_tau_limit(1.5, &LossModel::Quadratic, &n, &[1.0]).is_err());
    }

    #[test]
    fn neville_is_exact_on_quadratics() {
        let f = |t: f64| 2.0 - 3.0 * t + 0.5 * t * t;
        let pts: Vec<(f64, f64)> = [0.3, 0.2, 0.1].iter().map(|&t| (t, f(t))).collect();
        assert_relative_eq!(extrapolate_to_zero(&pts), 2.0, epsilon = 1e-13);
    }
}
