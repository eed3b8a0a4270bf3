//! Rayon pool against the sequential fallback: batch detection, cross-fit
//! residuals and independent scenario runs.

use aibc_core::detector::{cross_fit_residuals, DetectorConfig, DetectorModel, CALIBRATION_FOLDS};
use aibc_core::fusion::{DeviceLayout, FusedVector, TrainingWindow};
use aibc_core::netsim::{presets, run_scenario, RunOptions};
use aibc_core::par;
use aibc_core::synth::LowRankSource;
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

fn detection(c: &mut Criterion) {
    let source = LowRankSource::new(200, 5, 0.01, 1).unwrap();
    let layout = DeviceLayout::uniform(40, 5).unwrap();
    let mut window = TrainingWindow::new(layout, 200).unwrap();
    for t in 0..200 {
        window.push_slot(FusedVector::new(t, source.sample(t))).unwrap();
    }
    let model = DetectorModel::train(&window, &DetectorConfig::default()).unwrap();
    let batch: Vec<FusedVector> = (200..2200).map(|t| FusedVector::new(t, source.sample(t))).collect();

    let mut g = c.benchmark_group("detect_2000_slots");
    g.bench_function(BenchmarkId::new("rayon", 200), |b| {
        b.iter(|| par::map_slice(black_box(&batch), |d| model.detect(d).unwrap()))
    });
    g.bench_function(BenchmarkId::new("sequential", 200), |b| {
        b.iter(|| par::map_slice_seq(black_box(&batch), |d| model.detect(d).unwrap()))
    });
    g.finish();

    let d = window.matrix();
    let mut g = c.benchmark_group("cross_fit_residuals");
    g.bench_function("rayon", |b| {
        b.iter(|| cross_fit_residuals(black_box(&d), 5, CALIBRATION_FOLDS).unwrap())
    });
    g.bench_function("sequential", |b| {
        b.iter(|| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
            pool.install(|| cross_fit_residuals(black_box(&d), 5, CALIBRATION_FOLDS).unwrap())
        })
    });
    g.finish();
}

fn scenarios(c: &mut Criterion) {
    let cfgs: Vec<_> = (0..8)
        .map(|s| {
            let mut cfg = presets::attack_attenuation(true);
            cfg.seed = s;
            cfg.slots = 10;
            cfg
        })
        .collect();
    let opts = RunOptions::default();
    let mut g = c.benchmark_group("eight_scenarios");
    g.sample_size(10);
    g.bench_function("rayon", |b| {
        b.iter(|| par::map_slice(black_box(&cfgs), |cfg| run_scenario(cfg, &opts).unwrap()))
    });
    g.bench_function("sequential", |b| {
        b.iter(|| par::map_slice_seq(black_box(&cfgs), |cfg| run_scenario(cfg, &opts).unwrap()))
    });
    g.finish();
}

criterion_group!(benches, detection, scenarios);
criterion_main!(benches);
