use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use geodiag::curvature::transport::{median_positive_cost, w1_exact, w1_sinkhorn};
use geodiag::curvature::mean_curvature;
use geodiag::graph::build_class_graph;
use geodiag::spectral::{spectral_summary, DEFAULT_HEAT_TIMES};
use geodiag::topology::{point_cloud_summary, TopologyConfig};
use geodiag::{ClassGraph, CurvatureConfig, Matrix, ZeroTol};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn cloud(n: usize, dim: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    Matrix::from_rows(&rows)
}

fn class_graph(n: usize) -> ClassGraph {
    build_class_graph(&cloud(n, 16, 7), 0, 10).unwrap().without_isolated().0
}

fn graph_construction(c: &mut Criterion) {
    let mut group = c.benchmark_group("mutual_knn");
    for n in [100, 200, 500] {
        let points = cloud(n, 16, 1);
        group.bench_with_input(BenchmarkId::from_parameter(n), &points, |b, p| {
            b.iter(|| build_class_graph(p, 0, 10).unwrap())
        });
    }
    group.finish();
}

fn spectral(c: &mut Criterion) {
    let mut group = c.benchmark_group("spectral_summary");
    for n in [100, 200, 500] {
        let g = class_graph(n);
        group.bench_with_input(BenchmarkId::from_parameter(n), &g, |b, g| {
            b.iter(|| spectral_summary(g, ZeroTol::default(), &DEFAULT_HEAT_TIMES, false).unwrap())
        });
    }
    group.finish();
}

fn transport(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let size = 12;
    let mut cost = Matrix::zeros(size, size);
    for i in 0..size {
        for j in 0..size {
            cost.set(i, j, if i == j { 0.0 } else { rng.random_range(1..=3) as f64 });
        }
    }
    let uniform = vec![1.0 / size as f64; size];
    let eps = 0.01 * median_positive_cost(&cost);
    let mut group = c.benchmark_group("w1_12x12");
    group.bench_function("exact", |b| b.iter(|| w1_exact(&uniform, &uniform, &cost).unwrap()));
    group.bench_function("sinkhorn", |b| {
        b.iter(|| w1_sinkhorn(&uniform, &uniform, &cost, eps, 2000, 1e-9).unwrap())
    });
    group.finish();
}

fn curvature(c: &mut Criterion) {
    let g = class_graph(200);
    let mut group = c.benchmark_group("mean_curvature_200");
    group.sample_size(10);
    group.bench_function("exact", |b| b.iter(|| mean_curvature(&g, &CurvatureConfig::exact()).unwrap()));
    group.bench_function("sinkhorn", |b| b.iter(|| mean_curvature(&g, &CurvatureConfig::default()).unwrap()));
    group.finish();
}

fn topology(c: &mut Criterion) {
    let points = cloud(200, 8, 5);
    let mut group = c.benchmark_group("persistent_homology_200");
    group.sample_size(10);
    group.bench_function("h0_h1", |b| {
        b.iter(|| point_cloud_summary(&points, &TopologyConfig::default()).unwrap())
    });
    group.finish();
}

criterion_group!(benches, graph_construction, spectral, transport, curvature, topology);
criterion_main!(benches);
