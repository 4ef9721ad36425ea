use std::hint::black_box;

use abe_core::synth::{generate_scenario, ScenarioSpec};
use abe_core::{
    stopping_time_with, trajectory_from_snapshots, ActivationSnapshot, DivergenceOptions, Execution, LayerActivations,
    Moment, PopulationKind,
};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn snapshots(t: usize, dims: &[usize], n: usize) -> Vec<ActivationSnapshot> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    (0..t as u64)
        .map(|c| {
            let layers = dims
                .iter()
                .enumerate()
                .map(|(l, &d)| {
                    let values = (0..n * d).map(|_| rng.random_range(-1.0f32..1.0)).collect();
                    LayerActivations::new(l as u32, n, d, values)
                })
                .collect();
            ActivationSnapshot::new(c, PopulationKind::SourceValid, layers)
        })
        .collect()
}

fn trajectory_build(c: &mut Criterion) {
    let snaps = snapshots(40, &[512, 512, 256, 128], 64);
    let mut g = c.benchmark_group("trajectory_build");
    for (name, exec) in MODES {
        g.bench_function(name, |b| b.iter(|| trajectory_from_snapshots("p", black_box(&snaps), exec).unwrap()));
    }
    g.finish();
}

fn window_search(c: &mut Criterion) {
    let mut g = c.benchmark_group("stopping_time");
    for t in [50usize, 200] {
        let spec = ScenarioSpec {
            layers: 18,
            checkpoints: t,
            planted_layer: 7,
            planted_moment: Moment::M2,
            breakpoint: t as u64 / 2,
            noise_sigma: 0.05,
            ..ScenarioSpec::default()
        };
        let s = generate_scenario(&spec).unwrap();
        let tv = t as u64 - 1;
        for (name, exec) in MODES {
            let opts = DivergenceOptions {
                execution: exec,
                ..DivergenceOptions::default()
            };
            g.bench_with_input(BenchmarkId::new(name, t), &opts, |b, opts| {
                b.iter(|| stopping_time_with(black_box(&s.target), &s.source, tv, opts).unwrap())
            });
        }
    }
    g.finish();
}

fn scenario_sweep(c: &mut Criterion) {
    let mut g = c.benchmark_group("scenario_sweep");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(name, |b| {
            b.iter(|| {
                exec.map_range(64, |seed| {
                    let spec = ScenarioSpec {
                        checkpoints: 30,
                        breakpoint: 12,
                        noise_sigma: 0.01,
                        seed: seed as u64,
                        ..ScenarioSpec::default()
                    };
                    let s = generate_scenario(&spec).unwrap();
                    let opts = DivergenceOptions {
                        execution: Execution::Sequential,
                        ..DivergenceOptions::default()
                    };
                    stopping_time_with(&s.target, &s.source, 29, &opts).unwrap().t_hat
                })
            })
        });
    }
    g.finish();
}

criterion_group!(benches, trajectory_build, window_search, scenario_sweep);
criterion_main!(benches);
