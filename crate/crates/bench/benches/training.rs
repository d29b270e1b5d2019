use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use cotkit::training::{init_training, sample_batch};
use cotkit::{generate_dataset, train_step, DatasetSpec, TrainConfig};

/// One full adversarial iteration per batch size; the m=16 / m=8 ratio is the
/// per-iteration scaling.
fn train_iteration(c: &mut Criterion) {
    let data = generate_dataset(&DatasetSpec::ar1(0.8, 0.5, 1024, 10, 1)).unwrap();
    let mut group = c.benchmark_group("train_step");
    for m in [8, 16] {
        let cfg = TrainConfig {
            batch_size: m,
            context_length: 5,
            ..TrainConfig::default()
        };
        let (mut state, mut rng) = init_training(&cfg, 1).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(m), &m, |b, _| {
            b.iter(|| {
                let batch = sample_batch(&data, m, &mut rng).unwrap();
                train_step(&mut state, &batch, &cfg, &mut rng).unwrap()
            })
        });
    }
    group.finish();
}

criterion_group!(benches, train_iteration);
criterion_main!(benches);
