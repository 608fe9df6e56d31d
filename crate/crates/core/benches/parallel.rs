use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use wildpu::config::{DataConfig, TrainConfig};
use wildpu::eval::random_bound_trials;
use wildpu::experiment::run_synthetic_seeds;
use wildpu::numerics::{Network, Tensor2};
use wildpu::par::Exec;

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn forward(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let net = Network::new(20, &[64, 64], 3, 3, &mut rng).unwrap();
    let data: Vec<f64> = (0..4000 * 20).map(|_| rng.random_range(-1.0..1.0)).collect();
    let batch = Tensor2::from_vec(4000, 20, data).unwrap();
    let mut g = c.benchmark_group("forward_4000x20");
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| net.forward_with(&batch, exec).unwrap())
        });
    }
    g.finish();
}

fn bound_trials(c: &mut Criterion) {
    let mut g = c.benchmark_group("bound_trials_200");
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| random_bound_trials(200, 6, 0, exec).unwrap())
        });
    }
    g.finish();
}

fn seeds(c: &mut Criterion) {
    let cfg = TrainConfig {
        epochs: 2,
        ..TrainConfig::default()
    };
    let data = DataConfig {
        per_class: 20,
        n_wild: 300,
        n_test: 300,
        ..DataConfig::default()
    };
    let mut g = c.benchmark_group("train_4_seeds");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| run_synthetic_seeds(&cfg, &data, 4, exec).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, forward, bound_trials, seeds);
criterion_main!(benches);
