use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use glottal_core::adles::{fit_frames, FitOptions};
use glottal_core::inverse_filtering::{iaif, IaifConfig};
use glottal_core::s2ap::{train_step, Architecture, FramePair, S2apModel, Sgd, TrainConfig};
use glottal_core::signal_io::frame_signal;
use glottal_core::synth::{synth_speaker, CohortSpec};
use glottal_core::{Exec, GlottalFlowEstimate, Label};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn flows() -> Vec<GlottalFlowEstimate> {
    let spec = CohortSpec {
        duration_secs: 0.2,
        ..CohortSpec::default()
    };
    let s = synth_speaker(&spec, 0, Label::Positive).unwrap();
    let frames = frame_signal(&s.recording, 50.0, 25.0).unwrap();
    frames
        .frames
        .iter()
        .enumerate()
        .map(|(i, f)| iaif(&f.samples, spec.sample_rate, &IaifConfig::default(), i).unwrap())
        .collect()
}

fn bench_fits(c: &mut Criterion) {
    let flows = flows();
    let opts = FitOptions {
        max_iters: 20,
        ..FitOptions::default()
    };
    let mut group = c.benchmark_group("fit_frames");
    group.sample_size(10);
    for exec in [Exec::Sequential, Exec::Parallel] {
        group.bench_with_input(BenchmarkId::from_parameter(format!("{exec:?}")), &exec, |b, &exec| {
            b.iter(|| fit_frames(&flows, &opts, exec))
        });
    }
    group.finish();
}

fn bench_train_step(c: &mut Criterion) {
    let config = TrainConfig {
        architecture: Architecture::new(2, 5, 16),
        ..TrainConfig::default()
    };
    let batch: Vec<FramePair> = (0..8)
        .map(|i| {
            let u: Vec<f64> = (0..400).map(|t| ((t * (i + 1)) as f64 * 0.05).sin()).collect();
            let m: Vec<f64> = u.iter().map(|v| v.abs()).collect();
            let label = if i % 2 == 0 { Label::Positive } else { Label::Negative };
            FramePair::new(u, m, label, format!("r{i}"), 0).unwrap()
        })
        .collect();
    let mut group = c.benchmark_group("train_step");
    group.sample_size(10);
    for exec in [Exec::Sequential, Exec::Parallel] {
        group.bench_with_input(BenchmarkId::from_parameter(format!("{exec:?}")), &exec, |b, &exec| {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let mut model = S2apModel::random(&config, &mut rng);
            let mut sgd = Sgd::new(&model, 1e-3, 0.9);
            b.iter(|| train_step(&mut model, &mut sgd, &batch, exec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, bench_fits, bench_train_step);
criterion_main!(benches);
