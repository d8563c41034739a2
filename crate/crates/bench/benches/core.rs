use ape_bench::{phantom_volume, random_map};
use ape_core::loss::{loss_and_grad, target_distances};
use ape_core::model::sliding_window_embed;
use ape_core::retrieval::nearest_voxel;
use ape_core::sampler::{sample_patch_pair, sample_positive_pairs};
use ape_core::{ApeModel, ModelConfig, SamplerConfig, SlidingWindowConfig};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

fn forward(c: &mut Criterion) {
    let model = ApeModel::<f32>::new(ModelConfig::default(), 0).unwrap();
    let volume = phantom_volume(1);
    let patch = volume.data.slice(ndarray::s![..32, ..32, ..24]).mapv(|v| v as f32);
    c.bench_function("forward_eval 32x32x24", |b| b.iter(|| model.forward_eval(black_box(patch.view())).unwrap()));
    let patches: Vec<_> = (0..8).map(|_| patch.clone()).collect();
    let views: Vec<_> = patches.iter().map(|p| p.view()).collect();
    let mut train_model = model.clone();
    c.bench_function("forward_train 8x(32x32x24)", |b| b.iter(|| train_model.forward_train(black_box(&views)).unwrap()));
    let mut g = c.benchmark_group("sliding_window");
    g.sample_size(10);
    g.bench_function("64x64x48", |b| b.iter(|| sliding_window_embed(&model, &volume, &SlidingWindowConfig::default()).unwrap()));
    g.finish();
}

fn loss(c: &mut Criterion) {
    let mut g = c.benchmark_group("loss_and_grad");
    for n in [250usize, 1000] {
        let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
        let mut rand = |rows| Array2::from_shape_simple_fn((rows, 3), || rng.random::<f64>());
        let (a, b, p) = (rand(n), rand(n), rand(n));
        let d = target_distances(p.view());
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| loss_and_grad(a.view(), Some(b.view()), black_box(&d), 1.0).unwrap())
        });
    }
    g.finish();
}

fn retrieval(c: &mut Criterion) {
    let map = random_map([64, 64, 48], 3);
    c.bench_function("nearest_voxel 64x64x48", |b| b.iter(|| nearest_voxel(&map, black_box([0.5, 0.5, 0.5]))));
}

fn sampler(c: &mut Criterion) {
    let volume = phantom_volume(2);
    let cfg = SamplerConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    c.bench_function("patch pair + 250 positive pairs", |b| {
        b.iter(|| {
            let pair = sample_patch_pair(&volume, &mut rng, &cfg).unwrap();
            sample_positive_pairs(&pair, 250, &mut rng).unwrap()
        })
    });
}

criterion_group!(benches, forward, loss, retrieval, sampler);
criterion_main!(benches);
