use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use hpnet::fpm::{feedback_pool, PoolConfig, Pose2D, Reducer};
use hpnet::numerics::ops::matmul;
use hpnet::numerics::tensor::Tensor;
use hpnet::topology::{graph_conv, normalize_adjacency, SkeletonGraph};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

fn random(shape: [usize; 2], rng: &mut ChaCha8Rng) -> Tensor<f32> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn bench_pool(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let map = Tensor::from_fn([96, 32, 24], |_| rng.random_range(0.0f32..1.0));
    let pose = Pose2D {
        joints: (0..17).map(|_| (rng.random_range(0..24), rng.random_range(0..32))).collect(),
    };
    let mut group = c.benchmark_group("feedback_pool");
    for region in [1, 3, 5] {
        for reducer in [Reducer::Mean, Reducer::Max] {
            let cfg = PoolConfig {
                region,
                reducer,
                ..PoolConfig::default()
            };
            group.bench_with_input(BenchmarkId::new(format!("{reducer:?}"), region), &cfg, |b, cfg| {
                b.iter(|| feedback_pool(black_box(&map), &pose, cfg).unwrap())
            });
        }
    }
    group.finish();
}

fn bench_graph_conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let adj = normalize_adjacency::<f32>(&SkeletonGraph::coco17()).unwrap();
    let mut group = c.benchmark_group("graph_conv");
    for (c_in, c_out) in [(96, 96), (96, 128), (128, 128)] {
        let f = random([17, c_in], &mut rng);
        let w = random([c_in, c_out], &mut rng);
        group.bench_function(format!("17x{c_in}->{c_out}"), |b| {
            b.iter(|| graph_conv(black_box(&f), &adj, &w).unwrap())
        });
    }
    group.finish();
}

fn bench_matmul(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut group = c.benchmark_group("matmul");
    for n in [16, 64, 128] {
        let a = random([n, n], &mut rng);
        let b = random([n, n], &mut rng);
        group.bench_function(format!("{n}x{n}"), |bench| bench.iter(|| matmul(black_box(&a), &b).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, bench_pool, bench_graph_conv, bench_matmul);
criterion_main!(benches);
