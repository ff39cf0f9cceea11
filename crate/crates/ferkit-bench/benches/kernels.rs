use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use ferkit::filters;
use ferkit::tape::{Padding, Tape};
use ferkit_bench::randn;

fn bench_matmul(c: &mut Criterion) {
    let a = randn(1, &[64, 128]);
    let b = randn(2, &[128, 64]);
    c.bench_function("matmul 64x128x64", |bch| {
        bch.iter(|| {
            let mut tape = Tape::<f32>::new();
            let ai = tape.constant(a.clone());
            let bi = tape.constant(b.clone());
            let out = tape.matmul(ai, bi).unwrap();
            black_box(tape.value(out).data()[0]);
        })
    });
}

fn bench_conv_forward(c: &mut Criterion) {
    let x = randn(3, &[8, 32, 32, 16]);
    let k = randn(4, &[3, 3, 16, 32]);
    c.bench_function("conv2d fwd 8x32x32x16 -> 32", |bch| {
        bch.iter(|| {
            let mut tape = Tape::<f32>::new();
            let xi = tape.constant(x.clone());
            let ki = tape.constant(k.clone());
            let out = tape.conv2d(xi, ki, None, 1, Padding::Same).unwrap();
            black_box(tape.value(out).data()[0]);
        })
    });
}

fn bench_conv_backward(c: &mut Criterion) {
    let x = randn(3, &[8, 32, 32, 16]);
    let k = randn(4, &[3, 3, 16, 32]);
    c.bench_function("conv2d fwd+bwd 8x32x32x16 -> 32", |bch| {
        bch.iter(|| {
            let mut tape = Tape::<f32>::new();
            let xi = tape.leaf(x.clone(), true);
            let ki = tape.leaf(k.clone(), true);
            let out = tape.conv2d(xi, ki, None, 1, Padding::Same).unwrap();
            let loss = tape.sum(out, &[], false).unwrap();
            let grads = tape.backward(loss).unwrap();
            black_box(grads.get(ki).unwrap().data()[0]);
        })
    });
}

fn bench_sobel(c: &mut Criterion) {
    let img = randn(5, &[256, 256]);
    c.bench_function("sobel 256x256", |bch| {
        bch.iter(|| {
            let (gx, gy) = filters::sobel(&img).unwrap();
            black_box(gx.data()[0] + gy.data()[0]);
        })
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = bench_matmul, bench_conv_forward, bench_conv_backward, bench_sobel
}
criterion_main!(benches);
