use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use mtl_lab::graph::backward;
use mtl_lab::nn::{conv2d, Conv2dParams};
use mtl_lab_bench::{conv_case, random_tensor};

fn eager(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv2d_forward");
    for &(c_in, c_out, size) in &[(3, 16, 64), (16, 32, 32), (64, 128, 8)] {
        let x = random_tensor(&[c_in, size, size], 1);
        let params = Conv2dParams {
            kernel: random_tensor(&[c_out, c_in, 3, 3], 2),
            bias: random_tensor(&[c_out], 3),
            stride: 1,
            padding: 1,
        };
        let id = format!("{c_in}x{size}->{c_out}");
        group.bench_with_input(BenchmarkId::from_parameter(id), &x, |bench, x| {
            bench.iter(|| conv2d(x, &params).expect("conv"))
        });
    }
    group.finish();
}

fn graph_backward(c: &mut Criterion) {
    let case = conv_case(8, 16, 32, 32, 2);
    c.bench_function("conv2d_forward_backward_batch8", |bench| {
        bench.iter(|| backward(&case.graph, &case.params, &case.feed, case.loss).expect("backward"))
    });
}

criterion_group!(benches, eager, graph_backward);
criterion_main!(benches);
