use criterion::{criterion_group, criterion_main, BatchSize, BenchmarkId, Criterion};
use nalgebra::DMatrix;

use gpum::analytic::AnalyticManifold;
use gpum::bm::{simulate_endpoints, SimConfig};
use gpum::data::swiss_roll_grid;
use gpum::exec;
use gpum::heat::{build_stack_rows, NeighborhoodSpec, VolumeMode};
use gpum::kernels::{kernel_matrix, RbfParams};

fn modes() -> [(&'static str, bool); 2] {
    [("parallel", true), ("sequential", false)]
}

fn run<R>(parallel: bool, f: impl FnOnce() -> R) -> R {
    if parallel {
        f()
    } else {
        exec::sequential(f)
    }
}

fn bm_paths(c: &mut Criterion) {
    let roll = AnalyticManifold::swiss_roll();
    let cfg = SimConfig { dt: 0.5, n_steps: 100, n_paths: 2000, seed: 1, max_rejects: 100 };
    let mut g = c.benchmark_group("bm_paths");
    g.sample_size(10);
    for (name, par) in modes() {
        g.bench_function(BenchmarkId::new(name, cfg.n_paths), |b| {
            b.iter(|| run(par, || simulate_endpoints(&roll, &[6.0, 4.0], &cfg).unwrap()))
        });
    }
    g.finish();
}

fn stack_rows(c: &mut Criterion) {
    let roll = AnalyticManifold::swiss_roll();
    let targets = swiss_roll_grid(250);
    let starts: Vec<usize> = (0..250).step_by(25).collect();
    let cfg = SimConfig { dt: 0.5, n_steps: 50, n_paths: 500, seed: 2, max_rejects: 100 };
    let spec = NeighborhoodSpec::new(0.5, VolumeMode::Riemannian).unwrap();
    let mut g = c.benchmark_group("stack_rows");
    g.sample_size(10);
    for (name, par) in modes() {
        g.bench_function(BenchmarkId::new(name, starts.len()), |b| {
            b.iter(|| run(par, || build_stack_rows(&roll, &targets, &starts, &cfg, &spec).unwrap()))
        });
    }
    g.finish();
}

fn kernel_rows(c: &mut Criterion) {
    let params = RbfParams::ard(1.0, vec![0.5, 2.0, 1.0]).unwrap();
    let mut g = c.benchmark_group("kernel_rows");
    for n in [200, 800] {
        let x = DMatrix::from_fn(n, 3, |i, j| ((i * 7 + j * 13) % 97) as f64 / 97.0);
        for (name, par) in modes() {
            g.bench_function(BenchmarkId::new(name, n), |b| {
                b.iter_batched(|| x.clone(), |x| run(par, || kernel_matrix(&params, &x, &x).unwrap()), BatchSize::LargeInput)
            });
        }
    }
    g.finish();
}

criterion_group!(benches, bm_paths, stack_rows, kernel_rows);
criterion_main!(benches);
