use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use lats_bench::warmed_grid;
use lats_core::numerics::Mat;
use lats_core::obs::{encode_intersection, HistoryBuffer};
use lats_core::{LatsModel, TrainConfig};

/// Encode + student VAE + policy forward, the path used at execution time.
fn student_path(c: &mut Criterion) {
    let cfg = TrainConfig::default();
    let model = LatsModel::new(cfg.clone(), 512);
    let mut group = c.benchmark_group("decision");
    for (rows, cols) in [(1, 1), (2, 2), (5, 5)] {
        let (env, _) = warmed_grid(rows, cols, 30);
        let n = env.n_agents();
        let history = HistoryBuffer::new();
        let h = Mat::zeros(n, cfg.d);
        group.bench_with_input(BenchmarkId::new("student_path", n), &n, |b, _| {
            b.iter(|| {
                let obs: Vec<_> = (0..n)
                    .map(|i| encode_intersection(env.state(), i, &history, cfg.obs_dims()).unwrap())
                    .collect();
                let refs: Vec<_> = obs.iter().collect();
                black_box(model.net.decide(&model.store, &refs, &h, None).unwrap())
            })
        });
    }
    group.finish();
}

criterion_group!(benches, student_path);
criterion_main!(benches);
