//! Timings of the pipeline stages at desk scale.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use num_complex::Complex64;

use rkm_core::limit_solver::solve_default_grid;
use rkm_core::orthopoly::MomentMethod;
use rkm_core::{
    build, eigenvalues, envelope_coeffs, mp_stieltjes, sample_matrix, solve_point, xi_moments, Diagonal, Envelope,
    Family, KernelKind, KernelSpec, LimitParams, VectorEnsemble,
};

fn kernel_build(c: &mut Criterion) {
    let mut group = c.benchmark_group("build");
    let spec = KernelSpec::new(KernelKind::InnerProduct, Diagonal::Zero, Envelope::exp(1.0));
    for n in [200usize, 800] {
        let sample = sample_matrix(VectorEnsemble::new(Family::GaussianIid, n / 2).unwrap(), n, 1).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(n), &sample, |b, s| {
            b.iter(|| build(&spec, black_box(s)))
        });
    }
    group.finish();
}

fn spectrum(c: &mut Criterion) {
    let mut group = c.benchmark_group("eigenvalues");
    group.sample_size(10);
    let spec = KernelSpec::new(KernelKind::InnerProduct, Diagonal::Zero, Envelope::exp(1.0));
    for n in [200usize, 800] {
        let sample = sample_matrix(VectorEnsemble::new(Family::GaussianIid, n / 2).unwrap(), n, 2).unwrap();
        let a = build(&spec, &sample).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(n), &a, |b, a| {
            b.iter(|| eigenvalues(black_box(a)))
        });
    }
    group.finish();
}

fn transforms(c: &mut Criterion) {
    let z = Complex64::new(0.7, 0.01);
    c.bench_function("mp_stieltjes", |b| {
        b.iter(|| mp_stieltjes(black_box(0.5), black_box(z)))
    });
    let params = LimitParams::new((2.0 / std::f64::consts::PI).sqrt(), 1.0, 1.0).unwrap();
    c.bench_function("solve_point", |b| {
        b.iter(|| solve_point(black_box(&params), black_box(z)))
    });
    let mut group = c.benchmark_group("solve_grid");
    group.sample_size(10);
    group.bench_function("4001", |b| {
        b.iter(|| solve_default_grid(black_box(&params), 4001, 1e-3))
    });
    group.finish();
}

fn moments(c: &mut Criterion) {
    let mut group = c.benchmark_group("moments");
    group.bench_function("exact_rademacher_16", |b| {
        b.iter(|| xi_moments(Family::RademacherIid, black_box(1000), 16, MomentMethod::Exact, 0))
    });
    group.sample_size(10);
    group.bench_function("monte_carlo_sphere_8", |b| {
        b.iter(|| {
            xi_moments(
                Family::SphereUniform,
                black_box(1000),
                8,
                MomentMethod::MonteCarlo { samples: 100_000 },
                0,
            )
        })
    });
    group.bench_function("envelope_coeffs_sign", |b| {
        b.iter(|| envelope_coeffs(&Envelope::sign_scaled(), Family::GaussianIid, 1000, 4, 100_000, 0))
    });
    group.finish();
}

criterion_group!(benches, kernel_build, spectrum, transforms, moments);
criterion_main!(benches);
