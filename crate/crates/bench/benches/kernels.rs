use aslora_core::{Graph, Tensor};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

fn matmul(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut group = c.benchmark_group("matmul_fwd_bwd");
    for n in [64usize, 128, 256] {
        let a: Tensor<f32> = Tensor::randn(&[n, n], 1.0, &mut rng);
        let b: Tensor<f32> = Tensor::randn(&[n, n], 1.0, &mut rng);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| {
                let mut g = Graph::new();
                let x = g.param(a.clone());
                let y = g.param(b.clone());
                let z = g.matmul(x, y).unwrap();
                let s = g.sum(z);
                g.backward(s).unwrap();
                black_box(g.grad(x).map(|v| v[0]))
            })
        });
    }
    group.finish();
}

fn attention_block(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x: Tensor<f32> = Tensor::randn(&[8 * 16, 64], 1.0, &mut rng);
    let gamma = Tensor::<f32>::full(&[64], 1.0);
    let beta = Tensor::<f32>::zeros(&[64]);
    c.bench_function("layer_norm_gelu_128x64", |bench| {
        bench.iter(|| {
            let mut g = Graph::new();
            let v = g.param(x.clone());
            let ga = g.param(gamma.clone());
            let be = g.param(beta.clone());
            let n = g.layer_norm(v, ga, be).unwrap();
            let h = g.gelu(n);
            let s = g.sum(h);
            g.backward(s).unwrap();
            black_box(g.grad(v).map(|v| v[0]))
        })
    });
}

criterion_group!(benches, matmul, attention_block);
criterion_main!(benches);
