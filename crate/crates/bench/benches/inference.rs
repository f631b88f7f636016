use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use glca_core::harness::synth::{generate_scene, SceneSpec, SyntheticScene};
use glca_core::model::{forward_infer, forward_train, InferMode};
use glca_core::tiling::plan_grid;
use glca_core::{ModelConfig, ModelParams, Tape};

fn scene(side: usize) -> SyntheticScene {
    generate_scene(&SceneSpec { height: side, width: side, num_classes: 3, seed: 0 }, 0).unwrap()
}

fn inference(c: &mut Criterion) {
    let cfg = ModelConfig::default();
    let params = ModelParams::init(&cfg, 0).unwrap();
    let mut group = c.benchmark_group("infer");
    group.sample_size(10);
    for side in [64, 128] {
        let s = scene(side);
        for mode in [InferMode::Patch, InferMode::Global] {
            group.bench_with_input(BenchmarkId::new(format!("{mode:?}"), side), &side, |b, _| {
                b.iter(|| forward_infer(&params, &cfg, black_box(&s.image), mode).unwrap())
            });
        }
    }
    group.finish();
}

fn train_step(c: &mut Criterion) {
    let cfg = ModelConfig::default();
    let params = ModelParams::init(&cfg, 0).unwrap();
    let s = scene(64);
    let grid = plan_grid(64, 64, cfg.patch, cfg.overlap).unwrap();
    let mut group = c.benchmark_group("train");
    group.sample_size(10);
    group.bench_function("forward+backward 64x64", |b| {
        b.iter(|| {
            let tape = Tape::new();
            let bound = params.bind(&tape, true);
            let out = forward_train(&tape, &bound, &cfg, &s.image, &s.labels, &grid).unwrap();
            tape.backward(&out.loss).unwrap()
        })
    });
    group.finish();
}

criterion_group!(benches, inference, train_step);
criterion_main!(benches);
