use chart_refinery::critique::parse_recommendations;
use chart_refinery_bench::completion;
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use std::hint::black_box;

fn bench_parse(c: &mut Criterion) {
    let mut g = c.benchmark_group("parse_recommendations");
    for n in [10, 1000] {
        let text = completion(n);
        g.throughput(Throughput::Bytes(text.len() as u64));
        g.bench_with_input(BenchmarkId::from_parameter(n), &text, |b, t| b.iter(|| parse_recommendations(black_box(t))));
    }
    g.finish();
}

criterion_group!(benches, bench_parse);
criterion_main!(benches);
