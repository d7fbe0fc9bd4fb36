use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use qoe_numeric::kernels::{conv1d_forward, conv1d_naive, ConvDims};
use qoe_numeric::{par, Rng, Tensor};

fn conv(c: &mut Criterion) {
    let mut rng = Rng::seed_from_u64(1);
    let mut group = c.benchmark_group("conv1d_forward");
    group.sample_size(20);
    for &(c_in, c_out, batch) in &[(47usize, 32usize, 64usize), (32, 64, 64)] {
        let d = ConvDims {
            c_in,
            c_out,
            batch,
            len: 40,
            kernel: 3,
        };
        let x = Tensor::randn(&[c_in, batch, 40], 1.0, &mut rng);
        let w = Tensor::randn(&[c_out, c_in, 3], 0.1, &mut rng);
        let b = Tensor::zeros(&[c_out]);
        let label = format!("{c_in}x{c_out}x{batch}");
        let mode = if par::is_parallel() { "im2col_parallel" } else { "im2col_sequential" };
        group.bench_with_input(BenchmarkId::new(mode, &label), &d, |bench, d| {
            bench.iter(|| conv1d_forward(x.data(), w.data(), b.data(), d))
        });
        group.bench_with_input(BenchmarkId::new("naive", &label), &d, |bench, d| {
            bench.iter(|| conv1d_naive(x.data(), w.data(), b.data(), d))
        });
    }
    group.finish();
}

criterion_group!(benches, conv);
criterion_main!(benches);
