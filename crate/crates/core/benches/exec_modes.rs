use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use seabed_core::gmrf::{estimate_traced, GmrfConfig};
use seabed_core::nn::ops::conv2d_forward;
use seabed_core::nn::{Model, Tensor};
use seabed_core::relief::{synthesize, TextureParams};
use seabed_core::sas::{render_with, RenderOptions, SonarGeometry};
use seabed_core::Exec;

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn conv(c: &mut Criterion) {
    let mut g = c.benchmark_group("conv3x3_16to16_64px");
    let x = Tensor::<f32>::from_fn([4, 16, 64, 64], |i| ((i * 7919) % 113) as f32 / 113.0 - 0.5);
    let w: Vec<f32> = (0..16 * 16 * 9).map(|i| ((i * 31) % 17) as f32 / 17.0 - 0.5).collect();
    let b = vec![0.01f32; 16];
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |bench| {
            bench.iter(|| conv2d_forward(black_box(&x), &w, &b, 16, 3, exec).unwrap())
        });
    }
    g.finish();
}

fn unet_inference(c: &mut Criterion) {
    let mut g = c.benchmark_group("unet_opt_infer_4x64px");
    g.sample_size(10);
    let x = Tensor::<f32>::from_fn([4, 1, 64, 64], |i| ((i * 13) % 29) as f32 / 29.0);
    for (name, exec) in MODES {
        let mut m = Model::<f32>::build("unet-opt", 1).unwrap();
        m.set_exec(exec);
        g.bench_function(BenchmarkId::from_parameter(name), |bench| {
            bench.iter(|| m.infer(black_box(&x)).unwrap())
        });
    }
    g.finish();
}

fn render(c: &mut Criterion) {
    let mut g = c.benchmark_group("render_256px");
    let h = synthesize(&TextureParams::default(), 3, 256, 0.05).unwrap();
    let geom = SonarGeometry::default();
    let opts = RenderOptions::default();
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |bench| {
            bench.iter(|| render_with(black_box(&h), &geom, &opts, exec).unwrap())
        });
    }
    g.finish();
}

fn gmrf(c: &mut Criterion) {
    let mut g = c.benchmark_group("gmrf_128px_10_iterations");
    g.sample_size(10);
    let h = synthesize(&TextureParams::default(), 5, 128, 0.05).unwrap();
    let geom = SonarGeometry::default();
    let img = render_with(&h, &geom, &RenderOptions::default(), Exec::Sequential).unwrap();
    let cfg = GmrfConfig {
        iterations: 10,
        ..GmrfConfig::default()
    };
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |bench| {
            bench.iter(|| estimate_traced(black_box(&img), &geom, &cfg, exec).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, conv, unet_inference, render, gmrf);
criterion_main!(benches);
