//! Batched kernels with the data-parallel path on and off.

use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::Rng;

use zdcflow::numerics::kernels::{attention_forward, conv2d_forward, group_norm_forward, AttnDims, Window};
use zdcflow::par;

fn random(n: usize, seed: u64) -> Vec<f32> {
    let mut rng = zdcflow::rng::seeded(seed);
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

const MODES: [(&str, bool); 2] = [("parallel", false), ("sequential", true)];

fn conv(c: &mut Criterion) {
    let (batch, ch, out_c) = (64, 16, 16);
    let g = Window::conv(ch, 16, 16, 3, 1, 1).unwrap();
    let x = random(batch * ch * 16 * 16, 1);
    let w = random(out_c * ch * 9, 2);
    let b = random(out_c, 3);
    let mut group = c.benchmark_group("conv2d_3x3_16ch_16x16_b64");
    for (name, seq) in MODES {
        par::set_sequential(seq);
        group.bench_function(BenchmarkId::from_parameter(name), |bch| {
            bch.iter(|| conv2d_forward(black_box(&x), batch, &g, &w, Some(&b), out_c))
        });
    }
    par::set_sequential(false);
    group.finish();
}

fn norm(c: &mut Criterion) {
    let (batch, ch, plane) = (64, 16, 256);
    let x = random(batch * ch * plane, 4);
    let (gamma, beta) = (vec![1.0; ch], vec![0.0; ch]);
    let mut group = c.benchmark_group("group_norm_16ch_b64");
    for (name, seq) in MODES {
        par::set_sequential(seq);
        group.bench_function(BenchmarkId::from_parameter(name), |bch| {
            bch.iter(|| group_norm_forward(black_box(&x), batch, ch, plane, 4, &gamma, &beta))
        });
    }
    par::set_sequential(false);
    group.finish();
}

fn attention(c: &mut Criterion) {
    let a = AttnDims { batch: 64, q_len: 64, kv_len: 73, dim: 32, heads: 2 };
    let q = random(a.batch * a.q_len * a.dim, 5);
    let k = random(a.batch * a.kv_len * a.dim, 6);
    let v = random(a.batch * a.kv_len * a.dim, 7);
    let mut group = c.benchmark_group("attention_64x73_b64");
    for (name, seq) in MODES {
        par::set_sequential(seq);
        group.bench_function(BenchmarkId::from_parameter(name), |bch| {
            bch.iter(|| attention_forward(black_box(&q), &k, &v, a))
        });
    }
    par::set_sequential(false);
    group.finish();
}

criterion_group!(benches, conv, norm, attention);
criterion_main!(benches);
