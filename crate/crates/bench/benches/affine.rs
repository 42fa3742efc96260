use std::hint::black_box;

use bbvae::{Tape, Tensor};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn filled(rows: usize, cols: usize, salt: usize) -> Tensor {
    Tensor::from_fn(&[rows, cols], |i| {
        (((i * 31 + salt) % 97) as f32 - 48.0) / 97.0
    })
}

/// Forward and backward through one dense layer at MNIST sizes.
fn affine(c: &mut Criterion) {
    let mut group = c.benchmark_group("affine");
    for &(batch, fan_in, fan_out) in &[
        (100usize, 784usize, 200usize),
        (100, 200, 200),
        (100, 16, 200),
    ] {
        let x = filled(batch, fan_in, 1);
        let w = filled(fan_in, fan_out, 2);
        let bias = filled(1, fan_out, 3);
        let id = format!("{batch}x{fan_in}x{fan_out}");
        group.bench_function(BenchmarkId::new("forward", &id), |b| {
            b.iter(|| {
                let mut tape = Tape::new();
                let (xv, wv, bv) = (
                    tape.constant(x.clone()),
                    tape.param(w.clone()),
                    tape.param(bias.clone()),
                );
                black_box(tape.affine(xv, wv, bv).unwrap());
            })
        });
        group.bench_function(BenchmarkId::new("forward_backward", &id), |b| {
            b.iter(|| {
                let mut tape = Tape::new();
                let (xv, wv, bv) = (
                    tape.constant(x.clone()),
                    tape.param(w.clone()),
                    tape.param(bias.clone()),
                );
                let y = tape.affine(xv, wv, bv).unwrap();
                let y = tape.tanh(y);
                let s = tape.sum(y);
                black_box(tape.backward(s).unwrap());
            })
        });
    }
    group.finish();
}

criterion_group!(benches, affine);
criterion_main!(benches);
