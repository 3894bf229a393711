use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use densjac::geometry::neighborhoods;
use densjac::solver::Objective;
use densjac::SolverConfig;
use densjac_bench::{disk, ramp, warped};

fn raster(c: &mut Criterion) {
    let mask = disk(256, 0.3);
    c.bench_function("neighborhoods 256", |b| b.iter(|| neighborhoods(black_box(&mask), 0.05).unwrap()));
}

fn maps(c: &mut Criterion) {
    let map = warped(64);
    c.bench_function("jacobian_field 64", |b| b.iter(|| black_box(&map).jacobian_field().unwrap()));
    c.bench_function("bilipschitz_estimate 64", |b| b.iter(|| black_box(&map).bilipschitz_estimate().unwrap()));
}

fn objective(c: &mut Criterion) {
    let map = warped(64);
    let rho = ramp(64);
    let obj = Objective::new(&rho, &SolverConfig { lipschitz_bound: 1.5, ..SolverConfig::default() }).unwrap();
    c.bench_function("objective gradient 64", |b| b.iter(|| obj.value_and_gradient(black_box(map.vertices()))));
}

criterion_group!(benches, raster, maps, objective);
criterion_main!(benches);
