use nalgebra::DMatrix;
use proptest::prelude::*;

use proxasym::diagnostics::trace_perturbation;
use proxasym::estimator::fit_bounds;
use proxasym::fixed_point::{delta, extrapolate_to_zero, solve_system_with, SolverOptions};
use proxasym::harness::ExperimentConfig;
use proxasym::{fit, gen_design, prox, solve_system, EntryLaw, LossModel, NoiseModel, QuadratureSettings};

fn loss() -> impl Strategy<Value = LossModel> {
    prop_oneof![
        Just(LossModel::Quadratic),
        (0.3f64..3.0).prop_map(|k| LossModel::SmoothedHuber { k }),
        (0.3f64..3.0, 0.01f64..1.0).prop_map(|(k, omega)| LossModel::SmoothedHuberRidge { k, omega }),
    ]
}

fn noise() -> impl Strategy<Value = NoiseModel> {
    prop_oneof![
        (0.3f64..2.0).prop_map(NoiseModel::gaussian),
        (0.3f64..1.5, 0.1f64..0.5).prop_map(|(s, h)| NoiseModel::laplace_smoothed(s, h)),
    ]
}

fn c_value() -> impl Strategy<Value = f64> {
    (-3.0f64..2.0).prop_map(|e| 10f64.powf(e))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn prox_is_monotone_and_nonexpansive(loss in loss(), c in c_value(), a in -50.0f64..50.0, b in -50.0f64..50.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let (ylo, yhi) = (prox(&loss, c, lo).unwrap().y, prox(&loss, c, hi).unwrap().y);
        prop_assert!(yhi - ylo >= -1e-12);
        prop_assert!(yhi - ylo <= hi - lo + 1e-12 * (1.0 + hi.abs().max(lo.abs())));
    }

    #[test]
    fn prox_solves_its_fixed_point(loss in loss(), c in c_value(), x in -50.0f64..50.0) {
        let p = prox(&loss, c, x).unwrap();
        prop_assert!((p.y + c * loss.psi(p.y) - x).abs() <= 1e-12 * (1.0 + x.abs()));
        prop_assert!((p.psi_at_y - loss.psi(p.y)).abs() <= 1e-15 * (1.0 + p.psi_at_y.abs()));
    }

    #[test]
    fn prox_shrinks_toward_zero(loss in loss(), c in c_value(), x in -50.0f64..50.0) {
        let y = prox(&loss, c, x).unwrap().y;
        prop_assert!(y.abs() <= x.abs());
        prop_assert!(y * x >= 0.0);
        let cap = loss.psi(x).abs().min(x.abs() / c);
        prop_assert!(loss.psi(y).abs() <= cap * (1.0 + 1e-12));
    }

    #[test]
    fn prox_monotone_in_c(loss in loss(), c in c_value(), ratio in 1.0f64..10.0, x in -50.0f64..50.0) {
        let (c1, c2) = (c, c * ratio);
        let (y1, y2) = (prox(&loss, c1, x).unwrap().y, prox(&loss, c2, x).unwrap().y);
        prop_assert!(loss.rho(y2) <= loss.rho(y1) * (1.0 + 1e-12));
        prop_assert!((c2 * loss.psi(y2)).powi(2) >= (c1 * loss.psi(y1)).powi(2) * (1.0 - 1e-12));
    }

    #[test]
    fn prox_derivatives_match_differences(loss in loss(), c in c_value(), x in -50.0f64..50.0) {
        let p = prox(&loss, c, x).unwrap();
        let h = 1e-6;
        let fd_x = (prox(&loss, c, x + h).unwrap().y - prox(&loss, c, x - h).unwrap().y) / (2.0 * h);
        let fd_c = (prox(&loss, c + h, x).unwrap().y - prox(&loss, c - h, x).unwrap().y) / (2.0 * h);
        prop_assert!((fd_x - p.dpdx).abs() <= 1e-6 * p.dpdx.abs());
        prop_assert!((fd_c - p.dpdc).abs() <= 1e-6 * p.dpdc.abs() + 1e-12);
        prop_assert!(p.dpdx > 0.0 && p.dpdx <= 1.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn delta_is_nonincreasing(
        loss in loss(),
        noise in noise(),
        kappa in 0.05f64..0.95,
        tau in 0.01f64..2.0,
        r in 0.0f64..3.0,
        xs in proptest::collection::vec(0.0f64..20.0, 6),
    ) {
        let law = noise.convolved(r);
        let mut xs = xs;
        xs.sort_by(f64::total_cmp);
        let values: Vec<f64> = xs.iter().map(|&x| delta(kappa, tau, &loss, &law, x).unwrap()).collect();
        for w in values.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-12);
        }
    }

    #[test]
    fn quadratic_matches_closed_form(kappa in 0.05f64..0.9, tau in 0.01f64..2.0, sigma in 0.5f64..2.0) {
        let sol = solve_system(kappa, tau, &LossModel::Quadratic, &NoiseModel::gaussian(sigma)).unwrap();
        let b = 1.0 - kappa + tau;
        let c = (-b + (b * b + 4.0 * tau * kappa).sqrt()) / (2.0 * tau);
        let a = (c / (1.0 + c)).powi(2);
        prop_assert!((sol.c - c).abs() <= 1e-8);
        prop_assert!((sol.r * sol.r - a * sigma * sigma / (kappa - a)).abs() <= 1e-8);
    }

    #[test]
    fn system_is_stable_under_finer_quadrature(
        loss in loss(),
        noise in noise(),
        kappa in 0.1f64..0.9,
        tau in 0.05f64..2.0,
    ) {
        let base = SolverOptions::default();
        let fine = SolverOptions { quadrature: QuadratureSettings::default().doubled(), ..base };
        let a = solve_system_with(kappa, tau, &loss, &noise, &base).unwrap();
        let b = solve_system_with(kappa, tau, &loss, &noise, &fine).unwrap();
        prop_assert!((a.r - b.r).abs() <= 1e-8 * (1.0 + a.r), "r {} vs {}", a.r, b.r);
        prop_assert!((a.c - b.c).abs() <= 1e-8 * (1.0 + a.c), "c {} vs {}", a.c, b.c);
        prop_assert!(a.eq1_residual.abs() <= 1e-9 && a.eq2_residual.abs() <= 1e-9);
    }

    #[test]
    fn fits_respect_deterministic_bounds(
        loss in loss(),
        noise in noise(),
        n in 10usize..60,
        ratio in 0.1f64..1.5,
        tau in 0.01f64..3.0,
        seed in any::<u64>(),
    ) {
        let p = ((n as f64 * ratio) as usize).max(1);
        let d = gen_design(n, p, EntryLaw::Gaussian, &noise, seed).unwrap();
        let f = fit(&d, &loss, tau).unwrap();
        let bounds = fit_bounds(&d, &loss, &f);
        prop_assert!(bounds.violations.is_empty(), "{:?}", bounds.violations);
    }

    #[test]
    fn trace_perturbation_bound_holds(dim in 2usize..12, extra in 0usize..20, tau in 0.01f64..2.0, seed in any::<u64>()) {
        use rand::SeedableRng;
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let m = dim / 2 + 1 + extra;
        let g = DMatrix::from_fn(m, dim, |_, _| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z
        });
        let a = g.transpose() * g / m as f64;
        let t = trace_perturbation(&a, tau).unwrap();
        prop_assert!(t.difference.abs() <= t.bound * (1.0 + 1e-12));
        prop_assert!((t.difference - t.formula).abs() <= 1e-9 * (1.0 + t.difference.abs()));
    }

    #[test]
    fn neville_reproduces_quadratics(a in -5.0f64..5.0, b in -5.0f64..5.0, c in -5.0f64..5.0) {
        let pts: Vec<(f64, f64)> = [0.4, 0.2, 0.1].iter().map(|&t| (t, a + b * t + c * t * t)).collect();
        prop_assert!((extrapolate_to_zero(&pts) - a).abs() <= 1e-12 * (1.0 + a.abs() + b.abs() + c.abs()));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn config_round_trips(
        loss in loss(),
        noise in noise(),
        seeds in proptest::collection::vec(any::<u64>(), 1..6),
        n in 2usize..5000,
        kappa in 0.05f64..2.0,
        tau in 0.01f64..5.0,
    ) {
        let mut config = ExperimentConfig::parse(&format!(
            "seeds = []\nchecks = [\"system\", \"fit_bounds\"]\nloss = {{ name = \"quadratic\" }}\n\
             noise = {{ name = \"gaussian\", sd = 1.0 }}\n[[cells]]\nn = {n}\nkappa = {kappa}\ntau = {tau}\n"
        )).unwrap();
        config.loss = loss;
        config.noise = noise;
        config.seeds = seeds;
        let text = config.to_toml().unwrap();
        let back = ExperimentConfig::parse(&text).unwrap();
        prop_assert_eq!(&back, &config);
        prop_assert_eq!(back.hash(), config.hash());
    }
}

/// Twenty fixed (law, g) pairs, so the statistical tolerance cannot flake between runs.
#[test]
fn quadrature_agrees_with_monte_carlo() {
    use rand::Rng;
    let mut rng = proxasym::rng::stream(11, 0, "quadrature_vs_mc");
    let funcs: [fn(f64) -> f64; 4] = [|z| z * z, |z| z.tanh(), |z| 1.0 / (1.0 + z * z), |z| (0.5 * z).cos()];
    for case in 0..20 {
        let noise = if case % 2 == 0 {
            NoiseModel::gaussian(rng.random_range(0.3..2.0))
        } else {
            NoiseModel::laplace_smoothed(rng.random_range(0.3..1.5), rng.random_range(0.1..0.5))
        };
        let law = noise.convolved(rng.random_range(0.0..2.0));
        let g = funcs[case % funcs.len()];
        let exact = law.expect(g).unwrap();
        let (mc, se) = law.expect_mc(g, 50_000, case as u64).unwrap();
        assert!((exact - mc).abs() <= 4.0 * se, "case {case}: {exact} vs {mc} +- {se}");
    }
}
