//! Benchmarks for the numeric kernels dominating solve time: the simplex
//! projection, the intersection projection, the block updates, and a short
//! end-to-end solve.

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use std::hint::black_box;

use lspvar::projections::{project_intersection, simplex_rank_project, ConstraintSpec};
use lspvar::solver::{
    evaluate_augmented, fit, init_random, update_basis, update_feasible_basis,
    update_weights_sparse, SolverConfig,
};
use lspvar_bench::{gaussian, generated_panel};

fn bench_simplex(c: &mut Criterion) {
    let theta: Vec<f64> = (0..40).map(|i| 4.0 / (1.0 + i as f64)).collect();
    c.bench_function("simplex_rank_project p=40 r=5", |b| {
        b.iter(|| simplex_rank_project(black_box(&theta), 14.14, 5).unwrap())
    });
}

fn bench_intersection(c: &mut Criterion) {
    let spec = ConstraintSpec::new(40, 5, (200f64).sqrt()).unwrap();
    let target = gaussian(40, 40, 9);
    c.bench_function("project_intersection p=40 r=5 cold", |b| {
        b.iter(|| project_intersection(black_box(&target), &spec, None, 500, 1e-8).unwrap())
    });
}

fn bench_blocks(c: &mut Criterion) {
    let panel = generated_panel(10, 40, 5, 30.0, 200, 17);
    let mut cfg = SolverConfig::auto(40, 10, 5);
    cfg.lasso_penalty = 0.1;
    let state = init_random(40, 10, &cfg, 3).unwrap();

    c.bench_function("update_weights_sparse M=10 p=40", |b| {
        b.iter_batched(
            || state.clone(),
            |mut s| update_weights_sparse(&mut s, &panel, &cfg).unwrap(),
            BatchSize::SmallInput,
        )
    });
    c.bench_function("update_feasible_basis p=40", |b| {
        b.iter_batched(
            || state.clone(),
            |mut s| update_feasible_basis(&mut s, &cfg).unwrap(),
            BatchSize::SmallInput,
        )
    });
    c.bench_function("update_basis M=10 p=40", |b| {
        b.iter_batched(
            || state.clone(),
            |mut s| update_basis(&mut s, &panel, &cfg).unwrap(),
            BatchSize::SmallInput,
        )
    });
    c.bench_function("evaluate_augmented M=10 p=40", |b| {
        b.iter(|| evaluate_augmented(black_box(&state), &panel, &cfg))
    });
}

fn bench_small_fit(c: &mut Criterion) {
    let panel = generated_panel(4, 8, 2, 6.0, 120, 23);
    let mut cfg = SolverConfig::auto(8, 4, 2);
    cfg.lasso_penalty = 0.05;
    cfg.max_iter = 400;
    let init = init_random(8, 4, &cfg, 5).unwrap();
    let mut group = c.benchmark_group("fit");
    group.sample_size(10);
    group.bench_function("fit M=4 p=8 T=120 capped", |b| {
        b.iter(|| fit(black_box(&panel), &cfg, &init).unwrap())
    });
    group.finish();
}

criterion_group!(
    benches,
    bench_simplex,
    bench_intersection,
    bench_blocks,
    bench_small_fit
);
criterion_main!(benches);
