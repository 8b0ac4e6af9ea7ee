//! Single-thread pool against the default pool for the two path-parallel
//! kernels. Without the `parallel` feature both variants run sequentially.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use ergodic_smp::adjoint::{solve_adjoint_finite, RegressionBasis, Terminal};
use ergodic_smp::exec::with_workers;
use ergodic_smp::forward::{simulate_state, TimeGrid};
use ergodic_smp::model::{ControlLaw, ModelSpec};

const PATHS: usize = 4096;

fn pools() -> [(&'static str, Option<usize>); 2] {
    [("one_thread", Some(1)), ("default_pool", None)]
}

fn simulate(c: &mut Criterion) {
    let model = ModelSpec::cubic1();
    let u = ControlLaw::linear_feedback(model.control_set(), 0.5);
    let grid = TimeGrid::new(0.01, 500).unwrap();
    let mut g = c.benchmark_group("simulate");
    g.sample_size(10);
    for (name, workers) in pools() {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| with_workers(workers, || simulate_state(&model, &u, &[1.0], grid, PATHS, 1).unwrap()))
        });
    }
    g.finish();
}

fn adjoint(c: &mut Criterion) {
    let model = ModelSpec::cubic1();
    let u = ControlLaw::linear_feedback(model.control_set(), 0.5);
    let grid = TimeGrid::new(0.01, 500).unwrap();
    let ens = simulate_state(&model, &u, &[1.0], grid, PATHS, 1).unwrap();
    let mut g = c.benchmark_group("adjoint");
    g.sample_size(10);
    for (name, workers) in pools() {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                with_workers(workers, || {
                    solve_adjoint_finite(&model, &ens, &u, RegressionBasis::default(), Terminal::Zero).unwrap()
                })
            })
        });
    }
    g.finish();
}

criterion_group!(benches, simulate, adjoint);
criterion_main!(benches);
