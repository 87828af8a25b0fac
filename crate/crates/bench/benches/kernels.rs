use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use elastireg_bench::{phantom_2d, smooth_field_3d};
use elastireg_core::amortizer::{predict_field, HyperNet};
use elastireg_core::energy::{elastic_energy, ncc_local, DEFAULT_NCC_WINDOW};
use elastireg_core::grid::{warp, warp_with_gradient};
use elastireg_core::{ElasticityParams, RawElasticity};

fn bench_ncc(c: &mut Criterion) {
    let mut g = c.benchmark_group("ncc_local");
    for n in [64usize, 128] {
        let ph = phantom_2d(n);
        g.bench_with_input(BenchmarkId::from_parameter(n), &ph, |b, ph| {
            b.iter(|| {
                ncc_local(
                    black_box(&ph.fixed),
                    black_box(&ph.moving),
                    DEFAULT_NCC_WINDOW,
                )
            })
        });
    }
    g.finish();
}

fn bench_elastic(c: &mut Criterion) {
    let params = RawElasticity::new(1.0, 1.0).unwrap();
    let mut g = c.benchmark_group("elastic_energy");
    for n in [16usize, 32] {
        let field = smooth_field_3d(n);
        g.bench_with_input(BenchmarkId::from_parameter(n), &field, |b, f| {
            b.iter(|| elastic_energy(black_box(f), params))
        });
    }
    g.finish();
}

fn bench_warp(c: &mut Criterion) {
    let ph = phantom_2d(128);
    c.bench_function("warp/128", |b| {
        b.iter(|| warp(black_box(&ph.moving), black_box(&ph.true_field)))
    });
    c.bench_function("warp_with_gradient/128", |b| {
        b.iter(|| warp_with_gradient(black_box(&ph.moving), black_box(&ph.true_field)))
    });
}

fn bench_predict(c: &mut Criterion) {
    let hyper = HyperNet::random(2, 3, 0.2).unwrap();
    let domain = phantom_2d(32).fixed.domain().clone();
    let params = ElasticityParams::new(0.2, 0.3).unwrap();
    c.bench_function("predict_field/32", |b| {
        b.iter(|| predict_field(black_box(&hyper), params, black_box(&domain)))
    });
}

criterion_group!(benches, bench_ncc, bench_elastic, bench_warp, bench_predict);
criterion_main!(benches);
