use std::hint::black_box;

use codesign::data::{generate_synthetic_dataset, GenConfig};
use codesign::grad::{backward_total, forward_total};
use codesign::rng::{substream, Stream};
use codesign::trainer::evaluate;
use codesign::{BSplineSurface, Exec, LossConfig, PredictorParams, SensorLayout};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

const EXECS: [(&str, Exec); 2] = [
    ("sequential", Exec::Sequential),
    ("parallel", Exec::Parallel),
];

fn training_step(c: &mut Criterion) {
    let ds = generate_synthetic_dataset(&GenConfig {
        count: 16,
        ..GenConfig::default()
    })
    .unwrap();
    let surfaces: Vec<BSplineSurface> = ds.surfaces().unwrap();
    let truths: Vec<&BSplineSurface> = surfaces.iter().collect();
    let layout = SensorLayout::random(20, 10.0, &mut substream(1, Stream::Layout)).unwrap();
    let params = PredictorParams::init(20, ds.m(), ds.n(), 1).unwrap();
    let cfg = LossConfig::default();

    let mut group = c.benchmark_group("step_batch16_m20");
    group.sample_size(20);
    for (name, exec) in EXECS {
        group.bench_function(BenchmarkId::new("forward_backward", name), |b| {
            b.iter(|| {
                let state = forward_total(&truths, &ds.base, &layout, &params, &cfg, exec).unwrap();
                black_box(backward_total(&state, &layout, &params).unwrap())
            })
        });
    }
    group.finish();
}

fn evaluation(c: &mut Criterion) {
    let ds = generate_synthetic_dataset(&GenConfig {
        count: 32,
        ..GenConfig::default()
    })
    .unwrap();
    let layout = SensorLayout::random(20, 10.0, &mut substream(2, Stream::Layout)).unwrap();
    let params = PredictorParams::init(20, ds.m(), ds.n(), 2).unwrap();

    let mut group = c.benchmark_group("evaluate_32_shapes");
    group.sample_size(10);
    for (name, exec) in EXECS {
        group.bench_function(BenchmarkId::new("grid20", name), |b| {
            b.iter(|| black_box(evaluate(&layout, &params, &ds.base, &ds, 20, 32, exec).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, training_step, evaluation);
criterion_main!(benches);
