use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use rand::{Rng, SeedableRng};
use shadowkv::ownership::{validate_hash_per_key, validate_view, HashRange, RangeSet};
use std::hint::black_box;

/// Every other range of a 1024-way split: 512 owned ranges.
fn owned() -> RangeSet {
    RangeSet::from_ranges(HashRange::FULL.split(1024).into_iter().step_by(2))
}

fn validation(c: &mut Criterion) {
    let owned = owned();
    assert_eq!(owned.len(), 512);
    let mut rng = rand::rngs::StdRng::seed_from_u64(3);
    let mut g = c.benchmark_group("batch_validation");
    for batch in [16usize, 256] {
        let keys: Vec<u64> = (0..batch).map(|_| rng.random()).collect();
        g.throughput(Throughput::Elements(batch as u64));
        g.bench_with_input(BenchmarkId::new("validate_view", batch), &keys, |b, keys| {
            b.iter(|| validate_view(black_box(7), black_box(7)) && black_box(keys).len() == batch)
        });
        let mut out = Vec::with_capacity(batch);
        g.bench_with_input(BenchmarkId::new("validate_hash_per_key", batch), &keys, |b, keys| {
            b.iter(|| {
                validate_hash_per_key(black_box(&owned), black_box(keys), &mut out);
                out.iter().all(|&x| x)
            })
        });
    }
    g.finish();
}

criterion_group!(benches, validation);
criterion_main!(benches);
