use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use exaggerator_bench::{desk, features, uniform};
use exaggerator_core::evalsuite::fid;
use exaggerator_core::graph::Graph;
use exaggerator_core::trainer::ExplainerTrainer;
use exaggerator_core::TrainConfig;

fn conv(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv2d");
    for &(n, cin, cout, hw) in &[(32usize, 1usize, 8usize, 32usize), (32, 8, 16, 16), (32, 32, 32, 8)] {
        let x = uniform(&[n, cin, hw, hw], 1);
        let w = uniform(&[cout, cin, 3, 3], 2);
        let id = format!("{n}x{cin}->{cout}@{hw}");
        group.bench_function(BenchmarkId::new("forward", &id), |b| {
            b.iter(|| {
                let mut g = Graph::new();
                let xv = g.constant(x.clone());
                let wv = g.constant(w.clone());
                g.conv2d(xv, wv, None, 1, 1).unwrap()
            })
        });
        group.bench_function(BenchmarkId::new("forward_backward", &id), |b| {
            b.iter(|| {
                let mut g = Graph::new();
                let xv = g.leaf(x.clone(), true);
                let wv = g.leaf(w.clone(), true);
                let y = g.conv2d(xv, wv, None, 1, 1).unwrap();
                let l = g.mean(y);
                g.backward(l).unwrap()
            })
        });
    }
    group.finish();
}

fn frechet(c: &mut Criterion) {
    let mut group = c.benchmark_group("fid");
    for dim in [16, 64] {
        let a = features(1000, dim, 3);
        let b = features(1000, dim, 4);
        group.bench_function(BenchmarkId::from_parameter(dim), |bench| bench.iter(|| fid(&a, &b).unwrap()));
    }
    group.finish();
}

fn train_step(c: &mut Criterion) {
    let (ds, clf) = desk(256);
    let cfg = TrainConfig::default();
    let mut trainer = ExplainerTrainer::new(&ds.images, &clf, &cfg).unwrap();
    let mut group = c.benchmark_group("train");
    group.sample_size(10);
    group.bench_function("step", |b| b.iter(|| trainer.step().unwrap()));
    group.finish();
}

criterion_group!(benches, conv, frechet, train_step);
criterion_main!(benches);
