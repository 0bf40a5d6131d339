use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use proxasym::diagnostics::{loo_report, lop_report};
use proxasym::{fit, prox, solve_system, LossModel, NoiseModel};
use proxasym_bench::half_aspect_design;

fn bench_prox(c: &mut Criterion) {
    let huber = LossModel::smoothed_huber(1.345);
    c.bench_function("prox/smoothed_huber", |b| {
        b.iter(|| {
            let mut acc = 0.0;
            for i in 0..100 {
                acc += prox(&huber, black_box(0.8), -5.0 + 0.1 * i as f64).unwrap().y;
            }
            acc
        })
    });
}

fn bench_system(c: &mut Criterion) {
    let mut group = c.benchmark_group("solve_system");
    for (name, loss, noise) in [
        ("quadratic", LossModel::Quadratic, NoiseModel::gaussian(1.0)),
        (
            "huber_gaussian",
            LossModel::smoothed_huber(1.345),
            NoiseModel::gaussian(1.0),
        ),
        (
            "huber_laplace",
            LossModel::smoothed_huber(1.345),
            NoiseModel::laplace_smoothed(1.0, 0.3),
        ),
    ] {
        group.bench_function(name, |b| {
            b.iter(|| solve_system(black_box(0.5), 1.0, &loss, &noise).unwrap())
        });
    }
    group.finish();
}

fn bench_fit(c: &mut Criterion) {
    let huber = LossModel::smoothed_huber(1.345);
    let mut group = c.benchmark_group("fit");
    group.sample_size(10);
    for n in [200usize, 400] {
        let d = half_aspect_design(n, 1);
        group.bench_with_input(BenchmarkId::new("smoothed_huber", n), &d, |b, d| {
            b.iter(|| fit(d, &huber, 1.0).unwrap())
        });
    }
    group.finish();
}

fn bench_diagnostics(c: &mut Criterion) {
    let huber = LossModel::smoothed_huber(1.345);
    let d = half_aspect_design(200, 2);
    let f = fit(&d, &huber, 1.0).unwrap();
    let mut group = c.benchmark_group("diagnostics");
    group.sample_size(10);
    group.bench_function("loo_5_indices", |b| {
        b.iter(|| loo_report(&d, &huber, 1.0, &f, &[0, 1, 2, 3, 4]).unwrap())
    });
    group.bench_function("lop", |b| b.iter(|| lop_report(&d, &huber, 1.0, &f).unwrap()));
    group.finish();
}

criterion_group!(benches, bench_prox, bench_system, bench_fit, bench_diagnostics);
criterion_main!(benches);
