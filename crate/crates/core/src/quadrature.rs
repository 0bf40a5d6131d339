//! Fixed quadrature rules: Gauss-Hermite and composite Simpson.

use std::f64::consts::PI;

/// Nodes and weights of a one-dimensional rule, `sum_i w_i g(x_i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl QuadratureRule {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn integrate<G: FnMut(f64) -> f64>(&self, mut g: G) -> f64 {
        self.nodes.iter().zip(&self.weights).map(|(&x, &w)| w * g(x)).sum()
    }

    /// Fallible integration; stops at the first error.
    pub fn try_integrate<G, E>(&self, mut g: G) -> Result<f64, E>
    where
        G: FnMut(f64) -> Result<f64, E>,
    {
        let mut acc = 0.0;
        for (&x, &w) in self.nodes.iter().zip(&self.weights) {
            acc += w * g(x)?;
        }
        Ok(acc)
    }
}

/// Gauss-Hermite rule for the weight `exp(-x^2)` on the real line.
///
/// Roots of the orthonormal Hermite polynomial are refined by Newton's method
/// from the usual asymptotic starting guesses; weights are `2 / H'_n(x)^2` in
/// the orthonormal normalization.
pub fn gauss_hermite(n: usize) -> QuadratureRule {
    assert!(n >= 1, "Gauss-Hermite rule needs at least one node");
    let pim4 = PI.powf(-0.25);
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let m = n.div_ceil(2);
    let nf = n as f64;
    let mut z = 0.0f64;
    for i in 0..m {
        z = match i {
            0 => (2.0 * nf + 1.0).sqrt() - 1.85575 * (2.0 * nf + 1.0).powf(-1.0 / 6.0),
            1 => z - 1.14 * nf.powf(0.426) / z,
            2 => 1.86 * z - 0.86 * nodes[0],
            3 => 1.91 * z - 0.91 * nodes[1],
            _ => 2.0 * z - nodes[i - 2],
        };
        let mut pp = 0.0;
        for _ in 0..100 {
            let mut p1 = pim4;
            let mut p2 = 0.0;
            for j in 0..n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = z * (2.0 / (jf + 1.0)).sqrt() * p2 - (jf / (jf + 1.0)).sqrt() * p3;
            }
            pp = (2.0 * nf).sqrt() * p2;
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() <= 1e-15 * z.abs().max(1.0) {
                break;
            }
        }
        nodes[i] = z;
        nodes[n - 1 - i] = -z;
        weights[i] = 2.0 / (pp * pp);
        weights[n - 1 - i] = weights[i];
    }
    // Ascending order.
    nodes.reverse();
    weights.reverse();
    QuadratureRule { nodes, weights }
}

/// Gauss-Hermite rule rescaled to integrate against `N(0, sd^2)`.
pub fn gaussian_rule(n: usize, sd: f64) -> QuadratureRule {
    let base = gauss_hermite(n);
    let scale = std::f64::consts::SQRT_2 * sd;
    QuadratureRule {
        nodes: base.nodes.iter().map(|x| scale * x).collect(),
        weights: base.weights.iter().map(|w| w / PI.sqrt()).collect(),
    }
}

/// Composite Simpson rule on `[a, b]` with `points` nodes (forced odd).
pub fn simpson(a: f64, b: f64, points: usize) -> QuadratureRule {
    let points = if points.is_multiple_of(2) {
        points + 1
    } else {
        points.max(3)
    };
    let h = (b - a) / (points - 1) as f64;
    let nodes = (0..points).map(|i| a + h * i as f64).collect();
    let weights = (0..points)
        .map(|i| {
            let f = if i == 0 || i == points - 1 {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            };
            f * h / 3.0
        })
        .collect();
    QuadratureRule { nodes, weights }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn gaussian_moments_are_exact() {
        for &n in &[1usize, 2, 5, 20, 61, 122] {
            let rule = gaussian_rule(n, 1.0);
            assert_relative_eq!(rule.integrate(|_| 1.0), 1.0, epsilon = 1e-13);
            assert!(rule.integrate(|x| x).abs() < 1e-13);
            if n >= 2 {
                assert_relative_eq!(rule.integrate(|x| x * x), 1.0, epsilon = 1e-12);
            }
            if n >= 3 {
                assert_relative_eq!(rule.integrate(|x| x.powi(4)), 3.0, epsilon = 1e-11);
            }
            if n >= 20 {
                // E[Z^12] = 11!! = 10395
                assert_relative_eq!(rule.integrate(|x| x.powi(12)), 10395.0, max_relative = 1e-11);
            }
        }
    }

    #[test]
    fn nodes_are_sorted_and_symmetric() {
        let rule = gauss_hermite(61);
        assert!(rule.nodes.windows(2).all(|w| w[0] < w[1]));
        for i in 0..61 {
            assert_relative_eq!(rule.nodes[i], -rule.nodes[60 - i], epsilon = 1e-13);
        }
        assert!(rule.nodes[30].abs() < 1e-14);
    }

    #[test]
    fn simpson_is_exact_on_cubics() {
        let rule = simpson(-1.0, 2.0, 11);
        assert_relative_eq!(
            rule.integrate(|x| x * x * x - x + 1.0),
            3.75 - 1.5 + 3.0,
            epsilon = 1e-13
        );
        assert_eq!(simpson(0.0, 1.0, 10).len(), 11);
    }
}
