use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use zj_bench::{mlp, random, vit};
use zj_core::linalg::svd;
use zj_core::merger::{linear_assignment, sinkhorn, weight_match};

fn matmul(c: &mut Criterion) {
    let mut g = c.benchmark_group("matmul");
    for n in [32, 64, 128] {
        let (a, b) = (random(&[n, n], 1), random(&[n, n], 2));
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |bch, _| bch.iter(|| a.matmul(&b).unwrap()));
    }
    g.finish();
}

fn decompositions(c: &mut Criterion) {
    let a = random(&[64, 32], 3);
    c.bench_function("svd 64x32", |b| b.iter(|| svd(&a).unwrap()));
}

fn assignment(c: &mut Criterion) {
    let mut g = c.benchmark_group("assignment");
    for n in [16, 64, 128] {
        let cost = random(&[n, n], 4);
        g.bench_with_input(BenchmarkId::new("hungarian", n), &n, |b, _| b.iter(|| linear_assignment(&cost).unwrap()));
        g.bench_with_input(BenchmarkId::new("sinkhorn", n), &n, |b, _| b.iter(|| sinkhorn(&cost, 0.05, 2000).unwrap()));
    }
    g.finish();
}

fn models(c: &mut Criterion) {
    let m = mlp(&[32, 128, 128, 10], 5);
    let x = random(&[256, 32], 6);
    c.bench_function("forward mlp 256x32", |b| b.iter(|| m.logits(&x).unwrap()));
    let v = vit(7);
    let xv = random(&[32, 16, 8], 8);
    c.bench_function("forward vit 32x16x8", |b| b.iter(|| v.logits(&xv).unwrap()));
    let (a, bm) = (mlp(&[32, 64, 64, 10], 9), mlp(&[32, 64, 64, 10], 10));
    let (ca, cb) = (a.params.to_checkpoint(&a.spec), bm.params.to_checkpoint(&bm.spec));
    c.bench_function("weight_match 64x64", |b| b.iter(|| weight_match(&ca, &cb, 10).unwrap()));
}

criterion_group!(benches, matmul, decompositions, assignment, models);
criterion_main!(benches);
