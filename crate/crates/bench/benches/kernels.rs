use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use hvq_bench::{gaussian, uniform_costs};
use hvq_core::codebook::{Codebook, DEFAULT_DECAY, DEFAULT_LAPLACE_EPS};
use hvq_core::model::{HvqTrans, ModelConfig};
use hvq_core::nn::{seeded_rng, Ctx};
use hvq_core::pot::{sinkhorn, SinkhornConfig};
use std::hint::black_box;

fn bench_sinkhorn(c: &mut Criterion) {
    let mut group = c.benchmark_group("sinkhorn");
    let cfg = SinkhornConfig::default();
    for &(n, k) in &[(49, 128), (196, 128), (196, 512)] {
        let cost = uniform_costs(n, k, 1);
        group.bench_with_input(
            BenchmarkId::from_parameter(format!("{n}x{k}")),
            &cost,
            |b, cost| b.iter(|| sinkhorn(black_box(cost), &cfg).unwrap()),
        );
    }
    group.finish();
}

fn bench_quantize(c: &mut Criterion) {
    let mut group = c.benchmark_group("quantize");
    let tokens = gaussian(196, 64, 2);
    for &k in &[64, 128, 256, 512] {
        let mut rng = seeded_rng(3);
        let mut book =
            Codebook::new(k, 64, 0, 1, DEFAULT_DECAY, DEFAULT_LAPLACE_EPS, &mut rng).unwrap();
        book.init_from_tokens(gaussian(k, 64, 4).view(), &mut rng)
            .unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(k), &book, |b, book| {
            b.iter(|| book.quantize(black_box(tokens.view())).unwrap())
        });
    }
    group.finish();
}

fn bench_forward(c: &mut Criterion) {
    let mut group = c.benchmark_group("forward");
    group.sample_size(10);
    for &(tokens, width) in &[(16, 32), (196, 64)] {
        let config = ModelConfig {
            tokens,
            width,
            classes: 3,
            ..ModelConfig::default()
        };
        let model = HvqTrans::new(config, 5).unwrap();
        let h0 = gaussian(4 * tokens, width, 6);
        group.bench_function(format!("batch4_n{tokens}_c{width}"), |b| {
            b.iter(|| {
                model
                    .forward(black_box(h0.view()), None, &mut Ctx::eval())
                    .unwrap()
            })
        });
    }
    group.finish();
}

criterion_group!(benches, bench_sinkhorn, bench_quantize, bench_forward);
criterion_main!(benches);
