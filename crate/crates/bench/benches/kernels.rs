use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use drpan_bench::{random_batch, random_map, toy_state};
use drpan_core::tensor::{conv2d, ConvGeom};
use drpan_core::region_proposal::find_min_window;
use drpan_core::{propose_region, GeometryConfig};

fn proposal(c: &mut Criterion) {
    let mut group = c.benchmark_group("proposal");
    for (size, window) in [(30, 8), (64, 8)] {
        let map = random_map(size, 1);
        group.bench_with_input(BenchmarkId::new("find_min_window", size), &window, |b, &w| {
            b.iter(|| find_min_window(black_box(&map), w).unwrap())
        });
    }
    let map = random_map(30, 2);
    let geom = GeometryConfig::new(256, 30, 64).unwrap();
    group.bench_function("propose_region_256", |b| b.iter(|| propose_region(black_box(&map), &geom).unwrap()));
    group.finish();
}

fn conv(c: &mut Criterion) {
    let x = random_batch(&[8, 16, 32, 32], 3);
    let w = random_batch(&[32, 16, 4, 4], 4);
    let geom = ConvGeom::forward(32, 32, 4, 2, 1).unwrap();
    c.bench_function("conv2d_8x16x32x32_k4s2", |b| b.iter(|| conv2d(black_box(&x), &w, &geom)));
}

fn networks(c: &mut Criterion) {
    let mut state = toy_state(8);
    let x = random_batch(&[8, 3, 64, 64], 5);
    let y = random_batch(&[8, 3, 64, 64], 6);
    let mut group = c.benchmark_group("toy_64");
    group.sample_size(10);
    group.bench_function("generate_batch8", |b| b.iter(|| state.generate(black_box(&x)).unwrap()));
    group.bench_function("train_step_batch8", |b| b.iter(|| state.train_step(black_box(&x), &y).unwrap()));
    group.finish();
}

criterion_group!(benches, proposal, conv, networks);
criterion_main!(benches);
