use chart_refinery::analytics::{davies_bouldin, kmeans, project_2d, select_k, KMeansParams, KRange};
use chart_refinery_bench::blobs;
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

fn bench_kmeans(c: &mut Criterion) {
    let mut g = c.benchmark_group("kmeans");
    for dims in [64, 1536] {
        let (m, _) = blobs(10, 100, dims);
        g.bench_with_input(BenchmarkId::new("k10_n1000", dims), &m, |b, m| {
            b.iter(|| kmeans(black_box(m), KMeansParams::new(10, 0)).unwrap())
        });
    }
    g.finish();
}

fn bench_davies_bouldin(c: &mut Criterion) {
    let (m, labels) = blobs(10, 100, 1536);
    let r = kmeans(&m, KMeansParams::new(10, 0)).unwrap();
    c.bench_function("davies_bouldin/n1000_d1536", |b| {
        b.iter(|| davies_bouldin(black_box(&m), black_box(&labels), &r.centroids))
    });
}

fn bench_projection(c: &mut Criterion) {
    let (m, _) = blobs(10, 100, 1536);
    c.bench_function("project_2d/n1000_d1536", |b| b.iter(|| project_2d(black_box(&m)).unwrap()));
}

fn bench_select_k(c: &mut Criterion) {
    let (m, _) = blobs(5, 40, 128);
    let mut g = c.benchmark_group("select_k");
    g.sample_size(10);
    g.bench_function("n200_d128_k2to10", |b| {
        b.iter(|| select_k(black_box(&m), KRange::new(2, 10).unwrap(), &[0, 1, 2]).unwrap())
    });
    g.finish();
}

criterion_group!(benches, bench_kmeans, bench_davies_bouldin, bench_projection, bench_select_k);
criterion_main!(benches);
