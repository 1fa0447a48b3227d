//! Render and conv kernels on the default rayon pool versus a single thread.
//!
//! Build with `--no-default-features` to time the sequential fallback itself.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use singrav::camera::{generate_rays, Camera};
use singrav::conv::{conv_forward, ConvGeom};
use singrav::render::{render_rays_tensor, render_rays_vjp, RaySampleSpec};
use singrav::tensor::Tensor;
use singrav::volume::RadianceVolume;

fn volume(res: usize) -> RadianceVolume {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let values = (0..res * res * res * 4).map(|_| rng.random_range(-2.0f32..2.0)).collect();
    RadianceVolume::new([res; 3], values, Default::default()).unwrap()
}

#[cfg(feature = "parallel")]
fn modes() -> Vec<(&'static str, rayon::ThreadPool)> {
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    vec![
        ("rayon", rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap()),
        ("one_thread", rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap()),
    ]
}

#[cfg(feature = "parallel")]
fn run<R: Send>(mode: &(&'static str, rayon::ThreadPool), f: impl FnOnce() -> R + Send) -> R {
    mode.1.install(f)
}

#[cfg(not(feature = "parallel"))]
fn modes() -> Vec<(&'static str, ())> {
    vec![("sequential", ())]
}

#[cfg(not(feature = "parallel"))]
fn run<R>(_: &(&'static str, ()), f: impl FnOnce() -> R) -> R {
    f()
}

fn render_bench(c: &mut Criterion) {
    let v = volume(32);
    let t = v.to_tensor();
    let bounds = v.bounds();
    let cam = Camera::default_view(64, 64).unwrap();
    let rays = generate_rays(&cam).unwrap();
    let spec = RaySampleSpec::new(64).unwrap();
    let g = Tensor::full(&[5, rays.len()], 1.0);
    let mut group = c.benchmark_group("render_64x64_m64");
    group.sample_size(10);
    for mode in modes() {
        group.bench_function(BenchmarkId::new("forward", mode.0), |b| {
            b.iter(|| run(&mode, || render_rays_tensor(&t, &bounds, &rays, spec).unwrap()))
        });
        group.bench_function(BenchmarkId::new("vjp", mode.0), |b| {
            b.iter(|| run(&mode, || render_rays_vjp(&t, &bounds, &rays, spec, &g).unwrap()))
        });
    }
    group.finish();
}

fn conv_bench(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::randn(&[1, 16, 16, 16, 16], &mut rng);
    let w = Tensor::randn(&[16, 16, 3, 3, 3], &mut rng);
    let geom = ConvGeom::cube(3, 1);
    let mut group = c.benchmark_group("conv3d_16ch_16cube");
    group.sample_size(10);
    for mode in modes() {
        group.bench_function(mode.0, |b| b.iter(|| run(&mode, || conv_forward(&x, &w, &geom))));
    }
    group.finish();
}

criterion_group!(benches, render_bench, conv_bench);
criterion_main!(benches);
