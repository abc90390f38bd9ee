use std::hint::black_box;

use cl3d::detector::{DetectorConfig, DetectorState, TrainOptions, TrainSample};
use cl3d::par::{self, Exec};
use cl3d::pipeline::{prepare_split, RangeStrategy};
use cl3d::sim::{make_benchmark, SimConfig};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_sim() -> SimConfig {
    SimConfig {
        sequences: 8,
        eval_sequences: 1,
        ..SimConfig::default()
    }
}

fn bench_render(c: &mut Criterion) {
    let cfg = small_sim();
    let mut g = c.benchmark_group("render_benchmark");
    g.sample_size(10);
    for exec in [Exec::Sequential, Exec::Parallel] {
        g.bench_with_input(
            BenchmarkId::from_parameter(format!("{exec:?}")),
            &exec,
            |b, &exec| b.iter(|| black_box(make_benchmark(&cfg, exec).unwrap())),
        );
    }
    g.finish();
}

fn bench_train_epoch(c: &mut Criterion) {
    let bench = make_benchmark(&small_sim(), Exec::Parallel).unwrap();
    let pairs = prepare_split(&bench.source, RangeStrategy::None, true, Exec::Parallel).unwrap();
    let samples: Vec<TrainSample> = pairs
        .into_iter()
        .map(|p| TrainSample {
            cur: p.cur,
            prev: p.prev,
            labels: p.labels,
            velocity_supervised: true,
            shapes: Vec::new(),
        })
        .collect();
    let base = DetectorState::new(DetectorConfig::default(), 1).unwrap();
    let mut g = c.benchmark_group("train_epoch");
    g.sample_size(10);
    for exec in [Exec::Sequential, Exec::Parallel] {
        let opts = TrainOptions {
            augmentation: None,
            exec,
            freeze_shape: false,
        };
        g.bench_with_input(
            BenchmarkId::from_parameter(format!("{exec:?}")),
            &exec,
            |b, _| {
                b.iter(|| {
                    let mut state = base.clone();
                    let mut rng = ChaCha8Rng::seed_from_u64(0);
                    cl3d::detector::train_epoch(&mut state, &samples, &opts, None, &mut rng)
                        .unwrap();
                    black_box(state.params[0])
                })
            },
        );
    }
    g.finish();
}

fn bench_encode(c: &mut Criterion) {
    let bench = make_benchmark(&small_sim(), Exec::Parallel).unwrap();
    let frames: Vec<_> = bench
        .target_train
        .sequences
        .iter()
        .map(|s| s.frames[1].points.clone())
        .collect();
    let state = DetectorState::new(DetectorConfig::default(), 1).unwrap();
    let mut g = c.benchmark_group("encode_frames");
    g.sample_size(10);
    for exec in [Exec::Sequential, Exec::Parallel] {
        g.bench_with_input(
            BenchmarkId::from_parameter(format!("{exec:?}")),
            &exec,
            |b, &exec| {
                b.iter(|| black_box(par::map(exec, &frames, |f| state.encode(f, f).heat.len())))
            },
        );
    }
    g.finish();
}

criterion_group!(benches, bench_render, bench_train_epoch, bench_encode);
criterion_main!(benches);
