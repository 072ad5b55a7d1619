//! Per-check filter latency as the number of inserted signatures grows.

use std::hint::black_box;

use bloomcoreset::{sized_for, CountingBloomFilter};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

const DIM: usize = 512;
const PROBES: usize = 10_000;

fn membership(c: &mut Criterion) {
    let bytes = DIM / 8;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut probes = vec![0u8; PROBES * bytes];
    rng.fill_bytes(&mut probes);

    let mut group = c.benchmark_group("check");
    group.throughput(Throughput::Elements(PROBES as u64));
    for n in [1_000usize, 10_000, 100_000] {
        let mut filter = CountingBloomFilter::with_size(sized_for(n), DIM).unwrap();
        let mut sig = vec![0u8; bytes];
        for _ in 0..n {
            rng.fill_bytes(&mut sig);
            filter.update_packed(&sig);
        }
        group.bench_with_input(BenchmarkId::from_parameter(n), &filter, |b, f| {
            b.iter(|| {
                probes
                    .chunks_exact(bytes)
                    .filter(|p| f.check_packed(black_box(p)))
                    .count()
            })
        });
    }
    group.finish();
}

criterion_group!(benches, membership);
criterion_main!(benches);
