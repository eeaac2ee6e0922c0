use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

use kvpack_core::oracle::{exact_bin_pack, first_fit_decreasing};

fn instances(n: usize, count: usize) -> Vec<Vec<u64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
    (0..count).map(|_| (0..n).map(|_| rng.random_range(1..=1000)).collect()).collect()
}

fn bin_packing(c: &mut Criterion) {
    let mut g = c.benchmark_group("bin_pack");
    for n in [8, 12, 16, 20] {
        let sets = instances(n, 16);
        g.bench_with_input(BenchmarkId::new("exact", n), &sets, |b, sets| {
            b.iter(|| sets.iter().map(|s| exact_bin_pack(black_box(s), 1000).unwrap()).sum::<usize>())
        });
        g.bench_with_input(BenchmarkId::new("ffd", n), &sets, |b, sets| {
            b.iter(|| sets.iter().map(|s| first_fit_decreasing(black_box(s), 1000).unwrap()).sum::<usize>())
        });
    }
    g.finish();
}

criterion_group!(benches, bin_packing);
criterion_main!(benches);
