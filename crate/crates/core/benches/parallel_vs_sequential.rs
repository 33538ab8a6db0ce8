use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use bml_fbsde::exec::{with_mode, Mode};
use bml_fbsde::grad::loss_and_grad;
use bml_fbsde::loss::estimate_bml;
use bml_fbsde::problems::{coupled_reference_trial, CoupledFbsde, Hjb, ToyBsde};
use bml_fbsde::{init_mlp, make_grid, EstimatorKind, FbsdeProblem, LinearFeatures, LinearTrial, SeedSpec};

fn modes() -> [(&'static str, Mode); 2] {
    [("sequential", Mode::Sequential), ("parallel", Mode::Parallel)]
}

fn simulate_and_estimate(c: &mut Criterion) {
    let mut g = c.benchmark_group("estimate_bml");
    g.sample_size(10);
    let p = CoupledFbsde::default();
    let trial = coupled_reference_trial(&p, 1.0, 0.3);
    let grid = make_grid(1.0, 100).unwrap();
    for (name, mode) in modes() {
        g.bench_function(BenchmarkId::new("coupled", name), |b| {
            b.iter(|| {
                with_mode(mode, || {
                    estimate_bml(
                        &p,
                        &trial,
                        &grid,
                        4096,
                        SeedSpec::new(1, 0),
                        EstimatorKind::FullGrid,
                        256,
                    )
                    .unwrap()
                })
            })
        });
    }
    g.finish();
}

fn gradients(c: &mut Criterion) {
    let mut g = c.benchmark_group("loss_and_grad");
    g.sample_size(10);
    let toy = ToyBsde::new(3, 1.0);
    let linear = LinearTrial::new(LinearFeatures::Quartic, 3, 0.05, 0.1);
    let grid = make_grid(1.0, 1000).unwrap();
    let hjb = Hjb::new(100);
    let mlp = init_mlp(hjb.dims(), SeedSpec::new(2, 0));
    let coarse = make_grid(1.0, 20).unwrap();
    for (name, mode) in modes() {
        g.bench_function(BenchmarkId::new("toy-linear", name), |b| {
            b.iter(|| {
                with_mode(mode, || {
                    loss_and_grad(&toy, &linear, &grid, 1000, SeedSpec::new(3, 0), EstimatorKind::Particle).unwrap()
                })
            })
        });
        g.bench_function(BenchmarkId::new("hjb100-mlp", name), |b| {
            b.iter(|| {
                with_mode(mode, || {
                    loss_and_grad(&hjb, &mlp, &coarse, 1000, SeedSpec::new(4, 0), EstimatorKind::Particle).unwrap()
                })
            })
        });
    }
    g.finish();
}

criterion_group!(benches, simulate_and_estimate, gradients);
criterion_main!(benches);
