use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use confdet::oracle::{generate, OracleSpec};
use confdet::pipeline::{run_experiment, Regime, RunConfig};
use confdet::regression::Scaling;
use confdet::Parallelism;

fn runs(c: &mut Criterion) {
    let data = generate(&OracleSpec {
        n_records: 5000,
        n_classes: 4,
        class_noise_scales: vec![2.0, 3.0, 5.0, 8.0],
        hetero_decades: 1.0,
        seed: 1,
        ..OracleSpec::default()
    })
    .unwrap()
    .dataset;
    let threads = std::thread::available_parallelism().map_or(2, |n| n.get().max(2));
    let modes = [
        ("sequential", Parallelism::Sequential),
        ("threads", Parallelism::Threads(threads)),
        ("available", Parallelism::Available),
    ];
    for regime in [Regime::ClassAgnostic, Regime::TwoStep] {
        let config = RunConfig {
            n_runs: 20,
            regime,
            stratified: regime.needs_stratification(),
            scaling: Scaling::Scaled,
            master_seed: 7,
            ..RunConfig::default()
        };
        let mut group = c.benchmark_group(format!("{regime:?}"));
        group.sample_size(10);
        for (name, par) in modes {
            group.bench_with_input(BenchmarkId::from_parameter(name), &par, |b, &par| {
                b.iter(|| run_experiment(black_box(&data), None, &config, par).unwrap())
            });
        }
        group.finish();
    }
}

criterion_group!(benches, runs);
criterion_main!(benches);
