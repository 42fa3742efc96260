use std::hint::black_box;

use bbvae::ans::{quantize_pmf, AnsState};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SYMBOLS: usize = 10_000;

fn push_pop(c: &mut Criterion) {
    let mut group = c.benchmark_group("ans");
    group.throughput(Throughput::Elements(SYMBOLS as u64));
    for &(alphabet, precision) in &[(2usize, 16u32), (256, 16), (16_384, 28)] {
        let mut rng = ChaCha8Rng::seed_from_u64(alphabet as u64);
        let probs: Vec<f64> = (0..alphabet).map(|_| rng.random::<f64>() + 1e-3).collect();
        let total: f64 = probs.iter().sum();
        let probs: Vec<f64> = probs.iter().map(|p| p / total).collect();
        let pmf = quantize_pmf(&probs, precision).unwrap();
        let symbols: Vec<usize> = (0..SYMBOLS)
            .map(|_| rng.random_range(0..alphabet))
            .collect();
        let id = format!("{alphabet}x{precision}");
        group.bench_with_input(BenchmarkId::new("push", &id), &symbols, |b, syms| {
            b.iter(|| {
                let mut s = AnsState::new();
                for &x in syms {
                    s.push(x, &pmf).unwrap();
                }
                black_box(s)
            })
        });
        let mut full = AnsState::new();
        for &x in &symbols {
            full.push(x, &pmf).unwrap();
        }
        group.bench_with_input(BenchmarkId::new("pop", &id), &full, |b, full| {
            b.iter(|| {
                let mut s = full.clone();
                for _ in 0..SYMBOLS {
                    black_box(s.pop(&pmf).unwrap());
                }
            })
        });
    }
    group.finish();
}

criterion_group!(benches, push_pop);
criterion_main!(benches);
