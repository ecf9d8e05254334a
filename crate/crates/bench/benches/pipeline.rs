use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use voxelforge::gabor::build_bank;
use voxelforge::mlp::{init_params, loss_gradient};
use voxelforge::sparse::romp_solve;
use voxelforge::stats::randomization_threshold;
use voxelforge::{GaborConfig, RompConfig, StimulusImage, TrainConfig, VoxelWeights};
use voxelforge_bench::{gaussian_matrix, planted_target, response_pair};

fn gabor(c: &mut Criterion) {
    let config = GaborConfig {
        image_size: 64,
        frequencies: vec![1.0, 2.0, 4.0, 8.0, 16.0],
        ..GaborConfig::default()
    };
    let bank = build_bank(&config).unwrap();
    let image = StimulusImage::grating(64, 8.0, 0.3, 0.0);
    c.bench_function("gabor_extract_64px", |b| b.iter(|| bank.extract_features(black_box(&image)).unwrap()));
}

fn romp(c: &mut Criterion) {
    let dictionary = gaussian_matrix(400, 1000, 1);
    let target = planted_target(&dictionary, 10);
    let config = RompConfig {
        max_sparsity: 10,
        ..RompConfig::default()
    };
    c.bench_function("romp_400x1000_s10", |b| {
        b.iter(|| romp_solve(black_box(&dictionary), black_box(&target), &config).unwrap())
    });
}

fn gradient(c: &mut Criterion) {
    let features = gaussian_matrix(128, 256, 2);
    let measured = gaussian_matrix(128, 100, 3);
    let config = TrainConfig::default();
    let params = init_params(256, 100, &config);
    let mu = VoxelWeights::ones(100);
    c.bench_function("loss_gradient_b128_d256_h100_v100", |b| {
        b.iter(|| loss_gradient(black_box(&params), &features, &measured, &mu, config.lambda).unwrap())
    });
}

fn threshold(c: &mut Criterion) {
    let (measured, predicted) = response_pair(120, 100, 4);
    let mut group = c.benchmark_group("randomization");
    group.sample_size(10);
    group.bench_function("threshold_120x100_1000_shuffles", |b| {
        b.iter(|| randomization_threshold(black_box(&measured), &predicted, 1000, 0.001, 9).unwrap())
    });
    group.finish();
}

criterion_group!(benches, gabor, romp, gradient, threshold);
criterion_main!(benches);
