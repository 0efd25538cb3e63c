use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ctm_bench::{blobs, planted_counts};
use ctm_core::clustering::{kmeans, silhouette};
use ctm_core::fusion::Weights;
use ctm_core::lda::fit_lda;
use ctm_core::{KMeansConfig, LdaConfig};
use std::hint::black_box;

fn gibbs(c: &mut Criterion) {
    let counts = planted_counts(200, 8, 1);
    let config = LdaConfig {
        n_iterations: 100,
        burn_in: 50,
        ..LdaConfig::new(8)
    };
    c.bench_function("lda_gibbs_100_sweeps", |b| {
        b.iter(|| fit_lda(black_box(&counts), &config).unwrap())
    });
}

fn clustering(c: &mut Criterion) {
    let mut group = c.benchmark_group("kmeans");
    for n in [200, 1000] {
        let x = blobs(n, 32, 8, 2);
        let config = KMeansConfig::default();
        group.bench_with_input(BenchmarkId::from_parameter(n), &x, |b, x| {
            b.iter(|| kmeans(x.view(), &config).unwrap())
        });
    }
    group.finish();

    let mut group = c.benchmark_group("silhouette");
    for n in [200, 1000] {
        let x = blobs(n, 32, 8, 3);
        let labels: Vec<usize> = (0..n).map(|i| i % 8).collect();
        group.bench_with_input(BenchmarkId::from_parameter(n), &x, |b, x| {
            b.iter(|| silhouette(x.view(), black_box(&labels)).unwrap())
        });
    }
    group.finish();
}

fn autoencoder_epoch(c: &mut Criterion) {
    let x = blobs(200, 264, 8, 4);
    let weights = Weights::random(264, 128, 32, 5);
    c.bench_function("autoencoder_gradient_200x264", |b| {
        b.iter(|| weights.loss_and_gradient(black_box(x.view())))
    });
}

criterion_group!(benches, gibbs, clustering, autoencoder_epoch);
criterion_main!(benches);
