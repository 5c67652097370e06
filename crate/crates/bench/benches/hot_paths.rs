use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use mflab_bench::{preset, symmetric};
use mflab_core::dynamics::step;
use mflab_core::eigen::symmetric_eigen;
use mflab_core::kernel::{gram_set, GramSource};
use mflab_core::metrics::{hungarian, w2_sliced};
use mflab_core::model::grads;
use mflab_core::rng::{CounterRng, Domain};

fn noisy_step(c: &mut Criterion) {
    let mut group = c.benchmark_group("step");
    for m in [1024usize, 4096] {
        let (hp, ds, e0) = preset(m);
        let noise = CounterRng::new(0, Domain::Noise);
        group.bench_with_input(BenchmarkId::from_parameter(m), &m, |b, _| {
            let mut e = e0.clone();
            b.iter(|| step(black_box(&mut e), &hp, &ds, &noise).unwrap())
        });
    }
    group.finish();
}

fn gradients(c: &mut Criterion) {
    let (hp, ds, e) = preset(4096);
    c.bench_function("grads/4096", |b| b.iter(|| grads(black_box(&e), &hp, &ds).unwrap()));
}

fn gram(c: &mut Criterion) {
    let (hp, ds, e) = preset(4096);
    c.bench_function("gram_set/4096", |b| {
        b.iter(|| gram_set(black_box(&e), hp.activation, &ds, GramSource::Init).unwrap())
    });
}

fn jacobi(c: &mut Criterion) {
    let mut group = c.benchmark_group("symmetric_eigen");
    for n in [8usize, 64] {
        let a = symmetric(n, 1);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, &n| b.iter(|| symmetric_eigen(black_box(&a), n).unwrap()));
    }
    group.finish();
}

fn assignment(c: &mut Criterion) {
    let m = 256;
    let cost: Vec<f64> = symmetric(m, 2).iter().map(|v| v.abs()).collect();
    c.bench_function("hungarian/256", |b| b.iter(|| hungarian(black_box(&cost), m)));
}

fn sliced(c: &mut Criterion) {
    let (_, _, e) = preset(4096);
    let (_, _, f) = preset(4096);
    let (a, b_pts) = (e.points(), f.points());
    c.bench_function("w2_sliced/4096x64", |b| b.iter(|| w2_sliced(black_box(&a), &b_pts, 5, 64, 0).unwrap()));
}

criterion_group!(benches, noisy_step, gradients, gram, jacobi, assignment, sliced);
criterion_main!(benches);
