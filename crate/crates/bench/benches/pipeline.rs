use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use polyshield_bench::bench_dataset;
use polyshield_core::{
    assemble_system, cosine_similarity, generate_naive, protect, solve_least_squares,
    ParamPolicy, SolverConfig,
};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

fn bench_protect(c: &mut Criterion) {
    let ds = bench_dataset(4, 1);
    let values = &ds.embeddings()[0].values;
    let mut group = c.benchmark_group("protect_512");
    for overlap in [0usize, 6] {
        let policy = ParamPolicy { overlap, ..ParamPolicy::default() };
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let params = generate_naive(&policy, "b", &mut rng).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(overlap), &params, |b, params| {
            b.iter(|| protect(black_box(values), params).unwrap())
        });
    }
    group.finish();
}

fn bench_cosine(c: &mut Criterion) {
    let mut rng = ChaCha12Rng::seed_from_u64(3);
    let a: Vec<f64> = (0..506).map(|_| rng.random_range(-1.0..1.0)).collect();
    let b: Vec<f64> = (0..506).map(|_| rng.random_range(-1.0..1.0)).collect();
    c.bench_function("cosine_506", |bench| {
        bench.iter(|| cosine_similarity(black_box(&a), black_box(&b)).unwrap())
    });
}

fn bench_solver(c: &mut Criterion) {
    let mut rng = ChaCha12Rng::seed_from_u64(4);
    let truth: Vec<f64> = (0..64).map(|_| rng.random_range(-0.3..0.3)).collect();
    let policy = ParamPolicy { overlap: 6, ..ParamPolicy::default() };
    let params = generate_naive(&policy, "b", &mut rng).unwrap();
    let template = protect(&truth, &params).unwrap();
    let system = assemble_system(&[template], &[params]).unwrap();
    let x0: Vec<f64> = truth.iter().map(|v| v * 0.5 + 0.01).collect();
    let config = SolverConfig::default();
    c.bench_function("solve_n64_o6", |bench| {
        bench.iter(|| solve_least_squares(black_box(&system), black_box(&x0), &config).unwrap())
    });
}

criterion_group!(benches, bench_protect, bench_cosine, bench_solver);
criterion_main!(benches);
