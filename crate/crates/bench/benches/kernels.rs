use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use dsc_bench::{filled, weights};
use dsc_core::frontend::{logmel, MelConfig, Waveform};
use dsc_core::ops::{conv2d, conv2d_backward, ConvSpec};
use dsc_core::{Model, ModelConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// CNN6/CNN14-style layers at the feature-map sizes they run at.
fn convolutions(c: &mut Criterion) {
    let cases = [
        ("dense3x3", ConvSpec::new(64, 64, (3, 3)).with_padding((1, 1)), [1, 64, 250, 16]),
        ("depthwise7x7", ConvSpec::depthwise(96, 1, 7), [1, 96, 252, 56]),
        ("pointwise", ConvSpec::pointwise(96, 384), [1, 96, 252, 56]),
    ];
    let mut g = c.benchmark_group("conv2d");
    g.sample_size(10);
    for (name, spec, shape) in cases {
        let x = filled(&shape);
        let w = weights(&spec);
        let b = filled(&[spec.out_channels]);
        let y = conv2d(&x, &w, Some(&b), &spec).unwrap();
        let macs = y.len() as u64 * (spec.in_channels / spec.groups * spec.kernel.0 * spec.kernel.1) as u64;
        g.throughput(Throughput::Elements(macs));
        g.bench_function(BenchmarkId::new("forward", name), |bn| {
            bn.iter(|| conv2d(&x, &w, Some(&b), &spec).unwrap())
        });
        g.bench_function(BenchmarkId::new("backward", name), |bn| {
            bn.iter(|| conv2d_backward(&x, &w, &spec, &y).unwrap())
        });
    }
    g.finish();
}

fn frontend(c: &mut Criterion) {
    let cfg = MelConfig::convnext();
    let w = Waveform::new(filled(&[320_000]).into_data(), cfg.sample_rate).unwrap();
    c.bench_function("logmel/10s", |bn| bn.iter(|| logmel(&w, &cfg).unwrap()));
}

fn models(c: &mut Criterion) {
    let mut g = c.benchmark_group("forward");
    g.sample_size(10);
    for cfg in [ModelConfig::convnext_toy(), ModelConfig::cnn6()] {
        let m = Model::build(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let x = filled(&[1, 1, 256, cfg.input.1]);
        g.bench_function(BenchmarkId::new(cfg.name.clone(), "256 frames"), |bn| {
            bn.iter(|| m.forward(&x).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, convolutions, frontend, models);
criterion_main!(benches);
