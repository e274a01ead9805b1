use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mfvlr::datagen::{self, DatasetSpec};
use mfvlr::model::{self, Model};
use mfvlr::trainer::{self, Adam, AdamConfig};
use mfvlr::{tensor, ModelConfig, Tensor};

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn kernels(c: &mut Criterion) {
    let mut g = c.benchmark_group("tensor");
    for n in [32, 64, 128] {
        let (a, b) = (random(&[n, n], 1), random(&[n, n], 2));
        g.bench_with_input(BenchmarkId::new("matmul", n), &n, |bch, _| {
            bch.iter(|| tensor::matmul(black_box(&a), black_box(&b)).unwrap())
        });
    }
    let x = random(&[16, 32, 32], 3);
    let k = random(&[16, 16, 3, 3], 4);
    g.bench_function("conv2d_16x32x32_3x3", |bch| {
        bch.iter(|| tensor::conv2d(black_box(&x), black_box(&k), None, 1, 1).unwrap())
    });
    let s = random(&[16, 256], 5);
    g.bench_function("softmax_16x256", |bch| bch.iter(|| tensor::softmax(black_box(&s), 1, 1.0).unwrap()));
    g.finish();
}

fn model_passes(c: &mut Criterion) {
    let cfg = ModelConfig::desk();
    let samples = datagen::generate(&DatasetSpec::new(0, 8, cfg.image_size)).unwrap();
    let model = Model::new(&cfg, 0).unwrap();
    let prompts = trainer::prompt_ids(&samples, &model);

    let mut g = c.benchmark_group("model");
    g.sample_size(10);
    g.bench_function("predict", |bch| {
        bch.iter(|| model::predict(&model.params, black_box(&samples[0].image), &model.vision).unwrap())
    });
    let batch: Vec<_> = samples.iter().collect();
    let ids: Vec<&[usize]> = prompts.iter().map(Vec::as_slice).collect();
    g.bench_function("train_step_batch8", |bch| {
        bch.iter_batched(
            || (model.clone(), Adam::new(&model.params)),
            |(mut m, mut opt)| trainer::train_step(&mut m, &mut opt, &batch, &ids, 1e-4, &AdamConfig::default()).unwrap(),
            criterion::BatchSize::LargeInput,
        )
    });
    g.finish();
}

criterion_group!(benches, kernels, model_passes);
criterion_main!(benches);
