use banet_core::blocks::{banet_forward, NetworkConfig};
use banet_core::train::{AugmentConfig, SynthConfig, TrainOptions, Trainer};
use banet_core::Shape4;
use banet_bench::{network, random};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn forward(c: &mut Criterion) {
    let mut g = c.benchmark_group("tiny forward");
    g.sample_size(20);
    let net = network(&NetworkConfig::tiny());
    for side in [64usize, 128, 256] {
        let img = random(Shape4::new(1, 3, side, side), 0);
        g.bench_with_input(BenchmarkId::from_parameter(side), &img, |b, img| b.iter(|| banet_forward(img, &net).unwrap()));
    }
    g.finish();
}

fn train_step(c: &mut Criterion) {
    let data: Vec<_> = banet_core::train::load_pairs(None, &SynthConfig { count: 16, ..SynthConfig::default() }).unwrap();
    let options = TrainOptions {
        steps: u64::MAX,
        augment: AugmentConfig { crop: 64, ..AugmentConfig::default() },
        ..TrainOptions::default()
    };
    let mut trainer = Trainer::<f32>::new(NetworkConfig::tiny(), options).unwrap();
    let mut g = c.benchmark_group("train step");
    g.sample_size(10);
    g.bench_function("tiny batch 4 crop 64", |b| b.iter(|| trainer.train_step(&data).unwrap()));
    g.finish();
}

criterion_group!(benches, forward, train_step);
criterion_main!(benches);
