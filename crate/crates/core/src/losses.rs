//! Convex losses and their proximal calculus.
//!
//! The proximal mapping of `c * rho` is the unique solution `y` of
//! `y + c * psi(y) = x`. It is found by a safeguarded Newton iteration on the
//! bracket `[min(0, x), max(0, x)]`, which always contains the root because
//! `psi` has the sign of its argument.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};
use crate::model_text::parse_model;

/// Relative tolerance on `|y + c psi(y) - x|`.
pub const PROX_TOLERANCE: f64 = 1e-12;
pub const PROX_MAX_ITER: usize = 200;

/// A twice differentiable convex loss with `rho(0) = 0` and `rho >= 0`.
///
/// Serializes as a table tagged by `name`, e.g.
/// `{ name = "smoothed_huber", k = 1.345 }`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum LossModel {
    /// `x^2 / 2`.
    Quadratic,
    /// `k^2 log cosh(x / k)`, with score `k tanh(x / k)` bounded by `k`.
    SmoothedHuber { k: f64 },
    /// Smoothed Huber plus `omega x^2 / 2`; strongly convex with modulus `omega`.
    SmoothedHuberRidge { k: f64, omega: f64 },
}

/// Bare names take `k = 1.345` and `omega = 0.05`.
impl FromStr for LossModel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        parse_model("loss", s, |name| match name {
            "quadratic" => Some(LossModel::Quadratic),
            "smoothed_huber" | "huber" => Some(LossModel::smoothed_huber(1.345)),
            "smoothed_huber_ridge" => Some(LossModel::smoothed_huber_ridge(1.345, 0.05)),
            _ => None,
        })
        .and_then(|loss| loss.validate().map(|()| loss))
    }
}

/// Result of a proximal evaluation at `(c, x)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProxValue {
    pub y: f64,
    /// Derivative in `x`: `1 / (1 + c psi'(y))`.
    pub dpdx: f64,
    /// Derivative in `c`: `-psi(y) / (1 + c psi'(y))`.
    pub dpdc: f64,
    pub psi_at_y: f64,
}

// log cosh(u) without overflow.
fn log_cosh(u: f64) -> f64 {
    let a = u.abs();
    a + (-2.0 * a).exp().ln_1p() - std::f64::consts::LN_2
}

fn sech2(u: f64) -> f64 {
    let a = u.abs();
    if a > 350.0 {
        return 0.0;
    }
    let e = (-2.0 * a).exp();
    4.0 * e / ((1.0 + e) * (1.0 + e))
}

impl LossModel {
    pub fn smoothed_huber(k: f64) -> Self {
        LossModel::SmoothedHuber { k }
    }

    pub fn smoothed_huber_ridge(k: f64, omega: f64) -> Self {
        LossModel::SmoothedHuberRidge { k, omega }
    }

    /// Display name including parameters.
    pub fn name(&self) -> String {
        match *self {
            LossModel::Quadratic => "quadratic".to_string(),
            LossModel::SmoothedHuber { k } => format!("smoothed_huber(k={k})"),
            LossModel::SmoothedHuberRidge { k, omega } => {
                format!("smoothed_huber(k={k})+{omega}*x^2/2")
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            LossModel::Quadratic => Ok(()),
            LossModel::SmoothedHuber { k } => check_k(k),
            LossModel::SmoothedHuberRidge { k, omega } => {
                check_k(k)?;
                if omega.is_finite() && omega >= 0.0 {
                    Ok(())
                } else {
                    Err(Error::InvalidArgument(format!(
                        "ridge weight omega must be finite and >= 0, got {omega}"
                    )))
                }
            }
        }
    }

    pub fn rho(&self, x: f64) -> f64 {
        match *self {
            LossModel::Quadratic => 0.5 * x * x,
            LossModel::SmoothedHuber { k } => k * k * log_cosh(x / k),
            LossModel::SmoothedHuberRidge { k, omega } => k * k * log_cosh(x / k) + 0.5 * omega * x * x,
        }
    }

    pub fn psi(&self, x: f64) -> f64 {
        match *self {
            LossModel::Quadratic => x,
            LossModel::SmoothedHuber { k } => k * (x / k).tanh(),
            LossModel::SmoothedHuberRidge { k, omega } => k * (x / k).tanh() + omega * x,
        }
    }

    pub fn psi_prime(&self, x: f64) -> f64 {
        match *self {
            LossModel::Quadratic => 1.0,
            LossModel::SmoothedHuber { k } => sech2(x / k),
            LossModel::SmoothedHuberRidge { k, omega } => sech2(x / k) + omega,
        }
    }

    /// Width of the region where `psi` bends; `None` when `psi` is linear.
    pub fn length_scale(&self) -> Option<f64> {
        match *self {
            LossModel::Quadratic => None,
            LossModel::SmoothedHuber { k } | LossModel::SmoothedHuberRidge { k, .. } => Some(k),
        }
    }

    /// Lower bound `C` on `psi'`; zero when the loss is merely convex.
    pub fn strong_convexity(&self) -> f64 {
        match *self {
            LossModel::Quadratic => 1.0,
            LossModel::SmoothedHuber { .. } => 0.0,
            LossModel::SmoothedHuberRidge { omega, .. } => omega,
        }
    }

    /// Exponent `m` with `|psi(x)| = O(|x|^m)`. Metadata only.
    pub fn growth_exponent(&self) -> u32 {
        1
    }

    /// Checks the structural invariants of a convex loss on `grid`
    /// (which should be sorted increasingly).
    pub fn check_invariants(&self, grid: &[f64]) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidArgument(format!("{}: {msg}", self.name())));
        if self.rho(0.0) != 0.0 {
            return fail(format!("rho(0) = {}", self.rho(0.0)));
        }
        let c = self.strong_convexity();
        let mut prev_psi = f64::NEG_INFINITY;
        for &x in grid {
            let (r, s, d) = (self.rho(x), self.psi(x), self.psi_prime(x));
            if !(r >= 0.0) {
                return fail(format!("rho({x}) = {r} < 0"));
            }
            if x != 0.0 && s.signum() != x.signum() {
                return fail(format!("sign of psi({x}) = {s}"));
            }
            // psi' may underflow to exactly C in the tails.
            if !(d >= c * (1.0 - 1e-12)) || d < 0.0 {
                return fail(format!("psi'({x}) = {d} below modulus {c}"));
            }
            if s < prev_psi {
                return fail(format!("psi decreases at {x}"));
            }
            prev_psi = s;
        }
        Ok(())
    }

    pub fn prox(&self, c: f64, x: f64) -> Result<ProxValue> {
        prox(self, c, x)
    }
}

fn check_k(k: f64) -> Result<()> {
    if k.is_finite() && k > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "Huber scale k must be finite and > 0, got {k}"
        )))
    }
}

/// The default set of losses.
pub fn loss_catalog() -> Vec<LossModel> {
    vec![
        LossModel::Quadratic,
        LossModel::smoothed_huber(1.345),
        LossModel::smoothed_huber_ridge(1.345, 0.05),
    ]
}

/// Proximal mapping of `c * rho` at `x`, with its derivatives.
pub fn prox(loss: &LossModel, c: f64, x: f64) -> Result<ProxValue> {
    ensure_finite("x", x)?;
    ensure_finite("c", c)?;
    if c < 0.0 {
        return Err(Error::InvalidArgument(format!("prox scale c must be >= 0, got {c}")));
    }
    let y = if c == 0.0 || x == 0.0 {
        x
    } else {
        solve_prox(loss, c, x)?
    };
    let psi = loss.psi(y);
    let denom = 1.0 + c * loss.psi_prime(y);
    Ok(ProxValue {
        y,
        dpdx: 1.0 / denom,
        dpdc: -psi / denom,
        psi_at_y: psi,
    })
}

pub fn prox_dx(loss: &LossModel, c: f64, x: f64) -> Result<f64> {
    prox(loss, c, x).map(|p| p.dpdx)
}

pub fn prox_dc(loss: &LossModel, c: f64, x: f64) -> Result<f64> {
    prox(loss, c, x).map(|p| p.dpdc)
}

fn solve_prox(loss: &LossModel, c: f64, x: f64) -> Result<f64> {
    let g = |y: f64| y + c * loss.psi(y) - x;
    let tol = PROX_TOLERANCE * (1.0 + x.abs());
    let (mut lo, mut hi) = if x > 0.0 { (0.0, x) } else { (x, 0.0) };
    let mut y = x / (1.0 + c * loss.psi_prime(0.0));
    let mut residual = f64::INFINITY;
    for _ in 0..PROX_MAX_ITER {
        residual = g(y);
        if residual.abs() <= tol {
            return Ok(y);
        }
        if residual < 0.0 {
            lo = y;
        } else {
            hi = y;
        }
        let slope = 1.0 + c * loss.psi_prime(y);
        let newton = y - residual / slope;
        y = if newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
        if hi - lo <= f64::EPSILON * hi.abs().max(lo.abs()) {
            residual = g(y);
            if residual.abs() <= tol {
                return Ok(y);
            }
            break;
        }
    }
    Err(Error::ConvergenceFailure {
        iterations: PROX_MAX_ITER,
        residual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    const HUBER: LossModel = LossModel::SmoothedHuber { k: 1.345 };

    // argmin_y 0.5 * rho(y) + (y - 2)^2 / 2 for k = 1.345, by golden-section
    // search in 40-digit arithmetic.
    const HUBER_PROX_C05_X2: f64 = 1.464_400_723_110_495_8;

    #[test]
    fn quadratic_prox_is_shrinkage() {
        let p = prox(&LossModel::Quadratic, 1.0, 2.0).unwrap();
        assert_relative_eq!(p.y, 1.0, epsilon = 1e-14);
        assert_relative_eq!(p.dpdx, 0.5, epsilon = 1e-15);
        assert_relative_eq!(p.dpdc, -0.5, epsilon = 1e-14);
    }

    #[test]
    fn prox_at_zero_is_zero() {
        for loss in loss_catalog() {
            let p = prox(&loss, 3.0, 0.0).unwrap();
            assert_eq!(p.y, 0.0);
            assert_eq!(p.dpdc, 0.0);
        }
    }

    #[test]
    fn identity_at_zero_scale() {
        for loss in loss_catalog() {
            let p = prox(&loss, 0.0, -4.2).unwrap();
            assert_eq!(p.y, -4.2);
            assert_eq!(p.dpdx, 1.0);
        }
    }

    #[test]
    fn smoothed_huber_matches_golden_section_oracle() {
        let p = prox(&HUBER, 0.5, 2.0).unwrap();
        assert_relative_eq!(p.y, HUBER_PROX_C05_X2, epsilon = 1e-10);
    }

    #[test]
    fn smoothed_huber_derivatives_match_finite_differences() {
        let h = 1e-6;
        let p = prox(&HUBER, 0.5, 2.0).unwrap();
        let fd_x = (prox(&HUBER, 0.5, 2.0 + h).unwrap().y - prox(&HUBER, 0.5, 2.0 - h).unwrap().y) / (2.0 * h);
        let fd_c = (prox(&HUBER, 0.5 + h, 2.0).unwrap().y - prox(&HUBER, 0.5 - h, 2.0).unwrap().y) / (2.0 * h);
        assert_relative_eq!(p.dpdx, fd_x, max_relative = 1e-6);
        assert_relative_eq!(p.dpdc, fd_c, max_relative = 1e-6);
        // Frozen from the high-precision oracle.
        assert_relative_eq!(p.dpdx, 0.845_416_085_630_610_6, max_relative = 1e-8);
        assert_relative_eq!(p.dpdc, -0.905_608_488_269_026, max_relative = 1e-8);
    }

    #[test]
    fn catalog_metadata() {
        let cat = loss_catalog();
        assert_eq!(cat[0].strong_convexity(), 1.0);
        assert_eq!(cat[0].growth_exponent(), 1);
        assert_eq!(cat[1].strong_convexity(), 0.0);
        assert_eq!(cat[2].strong_convexity(), 0.05);
    }

    #[test]
    fn catalog_passes_invariants_on_dense_grid() {
        let grid: Vec<f64> = (0..10_000).map(|i| -50.0 + 100.0 * i as f64 / 9_999.0).collect();
        for loss in loss_catalog() {
            loss.check_invariants(&grid).unwrap();
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(matches!(prox(&HUBER, 1.0, f64::NAN), Err(Error::NonFiniteInput(_))));
        assert!(matches!(
            prox(&HUBER, f64::INFINITY, 1.0),
            Err(Error::NonFiniteInput(_))
        ));
        assert!(matches!(prox(&HUBER, -1.0, 1.0), Err(Error::InvalidArgument(_))));
        assert!(LossModel::smoothed_huber(0.0).validate().is_err());
        assert!(LossModel::smoothed_huber_ridge(1.0, -0.1).validate().is_err());
    }

    #[test]
    fn extreme_arguments_converge() {
        for loss in loss_catalog() {
            for &(c, x) in &[(1e6, 1e3), (1e-9, 1e8), (50.0, -1e-300), (1e3, -7.0)] {
                let p = prox(&loss, c, x).unwrap();
                assert!((p.y + c * loss.psi(p.y) - x).abs() <= PROX_TOLERANCE * (1.0 + x.abs()));
            }
        }
    }

    #[test]
    fn config_form_round_trips() {
        let loss: LossModel = toml::from_str("name = \"smoothed_huber\"\nk = 1.345").unwrap();
        assert_eq!(loss, HUBER);
        let q: LossModel = toml::from_str("name = \"quadratic\"").unwrap();
        assert_eq!(q, LossModel::Quadratic);
    }
}
