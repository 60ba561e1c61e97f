use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ssimloss::fit::{render_scene, fit_depth, FitConfig, SceneSpec};
use ssimloss::ssim::loss;
use ssimloss::{grad_loss, window_stats, LossKind, Padding, SsimConfig};
use ssimloss_bench::random_image;

fn bench_window_stats(c: &mut Criterion) {
    let mut group = c.benchmark_group("window_stats");
    for size in [32, 128] {
        let a = random_image(1, size, size, 3);
        let b = random_image(2, size, size, 3);
        group.bench_with_input(BenchmarkId::from_parameter(size), &size, |bench, _| {
            bench.iter(|| window_stats(black_box(&a), black_box(&b), 3, Padding::Reflect).unwrap())
        });
    }
    group.finish();
}

fn bench_losses(c: &mut Criterion) {
    let a = random_image(3, 64, 96, 3);
    let b = random_image(4, 64, 96, 3);
    let cfg = SsimConfig::default();
    let mut group = c.benchmark_group("loss_64x96x3");
    for kind in LossKind::ALL {
        group.bench_function(BenchmarkId::new("forward", kind.name()), |bench| {
            bench.iter(|| loss(kind, black_box(&a), black_box(&b), &cfg).unwrap().scalar)
        });
        group.bench_function(BenchmarkId::new("gradient", kind.name()), |bench| {
            bench.iter(|| grad_loss(kind, black_box(&a), black_box(&b), &cfg).unwrap())
        });
    }
    group.finish();
}

fn bench_fit_iteration(c: &mut Criterion) {
    let scene = render_scene(&SceneSpec::fronto_parallel_default()).unwrap();
    let cfg = FitConfig {
        iterations: 1,
        ..FitConfig::default()
    };
    c.bench_function("fit_iteration_64x96", |bench| {
        bench.iter(|| fit_depth(black_box(&scene.views()), &cfg).unwrap())
    });
}

criterion_group!(benches, bench_window_stats, bench_losses, bench_fit_iteration);
criterion_main!(benches);
