use criterion::{black_box, criterion_group, criterion_main, Criterion};
use dosegan::conv::{conv3d_backward, conv3d_forward, conv3d_forward_portable, ConvSpec};
use dosegan::metrics::ssim3d;
use dosegan_bench::{generator, tensor, volume};

fn conv(c: &mut Criterion) {
    let x = tensor(&[2, 16, 32, 32, 32], 1);
    let w = tensor(&[8, 16, 3, 3, 3], 2);
    let spec = ConvSpec::new(3, 1, 1);
    let mut g = c.benchmark_group("conv3d_16to8_32cube");
    g.bench_function("forward", |b| b.iter(|| conv3d_forward(black_box(&x), &w, None, spec).unwrap()));
    g.bench_function("forward_portable", |b| b.iter(|| conv3d_forward_portable(black_box(&x), &w, None, spec).unwrap()));
    let out = conv3d_forward(&x, &w, None, spec).unwrap();
    g.bench_function("backward", |b| {
        b.iter(|| conv3d_backward(black_box(&x), &w, out.data(), spec, true, true).unwrap())
    });
    g.finish();
}

fn networks(c: &mut Criterion) {
    let gen = generator(32);
    let x = tensor(&[1, 1, 32, 32, 32], 3);
    c.bench_function("generator_translate_32cube", |b| b.iter(|| gen.translate(black_box(&x)).unwrap()));
}

fn metrics(c: &mut Criterion) {
    let (a, b) = (volume(32, 4), volume(32, 5));
    c.bench_function("ssim3d_32cube", |bench| bench.iter(|| ssim3d(black_box(&a), &b, None).unwrap()));
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = conv, networks, metrics
}
criterion_main!(benches);
