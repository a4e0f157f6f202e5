use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use stainalign::encoder::{backward, forward, Mode, Upstream};
use stainalign::losses::{gromov_wasserstein, sinkhorn};
use stainalign::numerics::svd_values;
use stainalign::{EncoderParams, GotConfig, Matrix, Rng};
use stainalign_bench::{bench_encoder, gaussian, random_graph};

fn bench_sinkhorn(c: &mut Criterion) {
    let mut group = c.benchmark_group("sinkhorn");
    let mut rng = Rng::new(0);
    for n in [64, 256] {
        let cost = Matrix::from_fn(n, n, |_, _| rng.uniform());
        let marginal = vec![1.0 / n as f64; n];
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| {
            b.iter(|| sinkhorn(black_box(&cost), &marginal, &marginal, 0.05, 200, 1e-9).unwrap())
        });
    }
    group.finish();
}

fn bench_gromov(c: &mut Criterion) {
    let mut group = c.benchmark_group("gromov_wasserstein");
    group.sample_size(10);
    let mut rng = Rng::new(1);
    let cfg = GotConfig::default();
    for n in [32, 128] {
        let (a, b) = (random_graph(n, 64, &mut rng), random_graph(n, 64, &mut rng));
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bch, _| {
            bch.iter(|| gromov_wasserstein(black_box(&a), black_box(&b), &cfg).unwrap())
        });
    }
    group.finish();
}

fn bench_encoder_passes(c: &mut Criterion) {
    let cfg = bench_encoder();
    let mut rng = Rng::new(2);
    let params = EncoderParams::init(&cfg, &mut rng).unwrap();
    let patches = gaussian(512, cfg.d_patch, &mut rng);
    c.bench_function("encoder_forward/512", |b| {
        b.iter(|| forward(&params, &cfg, black_box(&patches), 1, Mode::Eval).unwrap())
    });
    let cache = forward(&params, &cfg, &patches, 1, Mode::Eval).unwrap();
    let upstream = vec![1.0; cfg.d_out];
    c.bench_function("encoder_backward/512", |b| {
        b.iter(|| {
            let mut grads = params.zeros_like();
            let up = Upstream { output: &upstream, hidden: None };
            backward(&params, &cfg, black_box(&cache), up, &mut grads).unwrap();
            grads
        })
    });
}

fn bench_svd(c: &mut Criterion) {
    let mut group = c.benchmark_group("svd_values");
    let mut rng = Rng::new(3);
    for (n, d) in [(200, 32), (1000, 128)] {
        let x = gaussian(n, d, &mut rng);
        group.bench_with_input(BenchmarkId::new("rows_x_cols", format!("{n}x{d}")), &x, |b, x| {
            b.iter(|| svd_values(black_box(x)).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, bench_sinkhorn, bench_gromov, bench_encoder_passes, bench_svd);
criterion_main!(benches);
