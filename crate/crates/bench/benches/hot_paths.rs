//! Hot-path benchmarks: banded solves, noise sampling, the exact
//! modeling-error engine and one fully-discrete Backward Euler step.

use chc_core::error_analysis::{exact_modeling_error, TailPolicy};
use chc_core::evolve::{be_fullydiscrete_final, EvolutionConfig, GateMode};
use chc_core::femspace::{assemble, build_noise_coupling, build_space};
use chc_core::linalg::SymBanded;
use chc_core::noise::{build_gram, sample_noise, SpaceTimeGrid};
use chc_core::spectral::validate_params;
use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

fn banded_cholesky_solve(c: &mut Criterion) {
    let n = 256;
    let mut a = SymBanded::zeros(n, 3);
    for i in 0..n {
        a.set(i, i, 8.0);
        for d in 1..=3.min(n - 1 - i) {
            a.set(i + d, i, -1.0 / d as f64);
        }
    }
    let chol = a.cholesky().unwrap();
    let b: Vec<f64> = (0..n).map(|i| (i as f64).sin()).collect();
    c.bench_function("banded_cholesky_solve_256", |bench| {
        bench.iter(|| black_box(chol.solve(black_box(&b))))
    });
}

fn noise_sampling(c: &mut Criterion) {
    let grid = SpaceTimeGrid::new(1.0, 64, 64).unwrap();
    let gram = build_gram(&grid);
    let mut seed = 0u64;
    c.bench_function("sample_noise_64x64", |bench| {
        bench.iter(|| {
            seed += 1;
            black_box(sample_noise(&grid, &gram, seed).unwrap())
        })
    });
}

fn modeling_error_point(c: &mut Criterion) {
    let grid = SpaceTimeGrid::new(1.0, 1 << 20, 32).unwrap();
    let params = validate_params(0.0, 1.0, 1).unwrap();
    let policy = TailPolicy {
        rel_tol: 0.01,
        k_cap: 50_000,
    };
    c.bench_function("exact_modeling_error_point", |bench| {
        bench.iter(|| {
            black_box(exact_modeling_error(&grid, &params, 1.0, &policy, None).unwrap())
        })
    });
}

fn fully_discrete_run(c: &mut Criterion) {
    let params = validate_params(0.0, 0.05, 16).unwrap();
    let grid = SpaceTimeGrid::new(0.05, 64, 32).unwrap();
    let gram = build_gram(&grid);
    let spec = build_space(3, 16).unwrap();
    let asm = assemble(&spec, 0.0);
    let coupling = build_noise_coupling(&spec, &grid);
    let config = EvolutionConfig::new(&params, 64, GateMode::Strict).unwrap();
    let sample = sample_noise(&grid, &gram, 5).unwrap();
    c.bench_function("fully_discrete_64_steps", |bench| {
        bench.iter(|| {
            black_box(
                be_fullydiscrete_final(&sample, &spec, &asm, &coupling, &config).unwrap(),
            )
        })
    });
}

criterion_group!(
    benches,
    banded_cholesky_solve,
    noise_sampling,
    modeling_error_point,
    fully_discrete_run
);
criterion_main!(benches);
