//! Kernel and pipeline timings. Run once as is and once with
//! `--no-default-features`; group names carry the mode so criterion keeps
//! both baselines side by side.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};

use mambavad::config::RunConfig;
use mambavad::data::Video;
use mambavad::gradcheck::random_tensor;
use mambavad::graph::Graph;
use mambavad::model::Model;
use mambavad::par::is_parallel;
use mambavad::pipeline::measure_videos;
use mambavad::ssm::{selective_scan_forward, ScanArgs};
use mambavad::tensor::Tensor;
use mambavad::train::{train_step, TrainState};

fn mode() -> &'static str {
    if is_parallel() {
        "parallel"
    } else {
        "sequential"
    }
}

fn random_f32(shape: &[usize], seed: u64, scale: f64) -> Tensor<f32> {
    random_tensor(shape, seed, scale).cast()
}

fn clip_video(frames: usize, size: usize) -> Video {
    Video {
        name: "bench".into(),
        frames: (0..frames)
            .map(|i| random_f32(&[size, size, 3], i as u64, 1.0).map(|v| v.abs()))
            .collect(),
        labels: None,
    }
}

fn scan(c: &mut Criterion) {
    let (l, d, n) = (256, 64, 16);
    let u = random_f32(&[l, d], 1, 1.0);
    let delta = random_f32(&[l, d], 2, 0.1).map(|v| v.abs() + 1e-3);
    let a = random_f32(&[d, n], 3, 1.0).map(|v| -v.abs() - 0.1);
    let b = random_f32(&[l, n], 4, 1.0);
    let cc = random_f32(&[l, n], 5, 1.0);
    let ds = random_f32(&[d], 6, 1.0);
    let args = ScanArgs {
        u: u.data(),
        delta: delta.data(),
        a: a.data(),
        b: b.data(),
        c: cc.data(),
        d_skip: ds.data(),
        len: l,
        dim: d,
        state: n,
    };
    c.bench_function(&format!("{}/selective_scan_256x64x16", mode()), |bench| {
        bench.iter(|| black_box(selective_scan_forward(black_box(&args), false)))
    });
}

fn linear(c: &mut Criterion) {
    let store = mambavad::ParamStore::<f32>::new();
    let x = random_f32(&[1024, 64], 7, 1.0);
    let w = random_f32(&[64, 128], 8, 0.1);
    c.bench_function(&format!("{}/linear_1024x64x128", mode()), |bench| {
        bench.iter(|| {
            let g = Graph::inference(&store);
            let y = g.linear(&g.constant(x.clone()), &g.constant(w.clone()), None).unwrap();
            black_box(y.to_tensor())
        })
    });
}

fn desk_pipeline(c: &mut Criterion) {
    let cfg = RunConfig::desk();
    let (model, store) = Model::build::<f32>(&cfg.model).unwrap();
    let video = clip_video(cfg.model.frames + 8, cfg.model.image_size);
    let videos = std::slice::from_ref(&video);

    let mut group = c.benchmark_group(format!("{}/desk", mode()));
    group.sample_size(10);
    group.bench_function("eval_8_windows", |bench| {
        bench.iter(|| black_box(measure_videos(&model, &store, videos, false).unwrap()))
    });
    group.bench_function("train_step_batch4", |bench| {
        bench.iter_batched(
            || TrainState::new(store.clone(), &cfg.train),
            |mut state| black_box(train_step(&model, &mut state, videos, &cfg.train).unwrap()),
            criterion::BatchSize::LargeInput,
        )
    });
    group.finish();
}

criterion_group!(benches, scan, linear, desk_pipeline);
criterion_main!(benches);
