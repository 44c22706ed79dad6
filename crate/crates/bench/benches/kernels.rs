use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;
use txsp_core::expansion::{expand_via_transposed_conv, paste_accumulate_reference};
use txsp_core::generator::generator_forward;
use txsp_core::selfsim::{selfsim_fast, selfsim_naive};
use txsp_core::tensor::conv2d;
use txsp_core::{ConvSpec, Dims, GeneratorConfig, GeneratorWeights, PaddingMode, Tensor};

fn pattern(dims: Dims, seed: usize) -> Tensor<f32> {
    Tensor::from_fn(dims, |n, c, y, x| {
        let k = (n * 131 + c * 31 + y * 17 + x * 7 + seed * 13) % 97;
        k as f32 / 48.0 - 1.0
    })
}

fn conv(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv2d_3x3");
    for (ch, side) in [(16, 64), (64, 32), (256, 8)] {
        let x = pattern([1, ch, side, side], 1);
        let w = pattern([ch, ch, 3, 3], 2);
        let spec = ConvSpec::new(1, PaddingMode::partial(1));
        group.bench_function(
            BenchmarkId::from_parameter(format!("{ch}ch_{side}px")),
            |b| b.iter(|| conv2d(black_box(&x), &w, None, &spec).unwrap()),
        );
    }
    group.finish();
}

fn selfsim(c: &mut Criterion) {
    let mut group = c.benchmark_group("selfsim");
    for (ch, side) in [(16, 8), (32, 16)] {
        let f = pattern([1, ch, side, side], 3);
        let id = format!("{ch}ch_{side}px");
        group.bench_function(BenchmarkId::new("fast", &id), |b| {
            b.iter(|| selfsim_fast(black_box(&f)).unwrap())
        });
        group.bench_function(BenchmarkId::new("naive", &id), |b| {
            b.iter(|| selfsim_naive(black_box(&f)).unwrap())
        });
    }
    group.finish();
}

fn expansion(c: &mut Criterion) {
    let mut group = c.benchmark_group("expansion");
    for (ch, side) in [(16, 8), (32, 16)] {
        let f = pattern([1, ch, side, side], 4);
        let s = pattern([1, 1, side + 1, side + 1], 5).map(|v| -v.abs());
        let id = format!("{ch}ch_{side}px");
        group.bench_function(BenchmarkId::new("transposed_conv", &id), |b| {
            b.iter(|| expand_via_transposed_conv(black_box(&f), &s).unwrap())
        });
        group.bench_function(BenchmarkId::new("paste_accumulate", &id), |b| {
            b.iter(|| paste_accumulate_reference(black_box(&f), &s).unwrap())
        });
    }
    group.finish();
}

fn generator(c: &mut Criterion) {
    let mut group = c.benchmark_group("generator_forward");
    group.sample_size(10);
    for (name, config) in [
        (
            "narrow",
            GeneratorConfig {
                width_multiplier: 1.0 / 16.0,
                ..GeneratorConfig::default()
            },
        ),
        ("desk", GeneratorConfig::desk()),
    ] {
        let g = GeneratorWeights::<f32>::init(config, 0).unwrap();
        let img = pattern([1, 3, 64, 64], 6).map(|v| 0.5 + 0.5 * v);
        group.bench_function(BenchmarkId::new(name, "64px"), |b| {
            b.iter(|| generator_forward(black_box(&img), &g).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, conv, selfsim, expansion, generator);
criterion_main!(benches);
