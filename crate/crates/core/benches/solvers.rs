//! Criterion benches: the two solvers head to head on the mass-spring
//! instance, horizon scaling for the null-space path, and the data-parallel
//! batch layer against its sequential fallback.
//!
//! Build with `--no-default-features` to measure the sequential fallback of
//! `run_batch` itself (both entry points then run sequentially).

use criterion::{criterion_group, criterion_main, Criterion};
use nsmpc_core::bench::{
    gen_mass_spring, gen_random_system, run_batch, run_batch_sequential, DEFAULT_SPRING_DT,
};
use nsmpc_core::ipm::{NullspaceSolver, SolverOptions, SolverStatus};
use nsmpc_core::reference::ClassicalSolver;

fn solver_head_to_head(c: &mut Criterion) {
    let opts = SolverOptions::default();
    let prob = gen_mass_spring(6, 3, 30, DEFAULT_SPRING_DT);
    let ns = NullspaceSolver::new(prob.clone(), opts.clone()).unwrap();
    let cs = ClassicalSolver::new(prob, opts).unwrap();

    let mut g = c.benchmark_group("mass_spring_m6_t30");
    g.sample_size(30);
    g.bench_function("nullspace", |b| {
        b.iter(|| {
            let res = ns.solve().unwrap();
            assert_eq!(res.status, SolverStatus::Converged);
            res.iterations
        })
    });
    g.bench_function("classical", |b| {
        b.iter(|| {
            let res = cs.solve().unwrap();
            assert_eq!(res.status, SolverStatus::Converged);
            res.iterations
        })
    });
    g.finish();
}

fn horizon_scaling(c: &mut Criterion) {
    let opts = SolverOptions::default();
    let mut g = c.benchmark_group("nullspace_horizon");
    g.sample_size(30);
    for t in [10usize, 20, 40] {
        let prob = gen_random_system(12, 3, t, 11);
        let ns = NullspaceSolver::new(prob, opts.clone()).unwrap();
        g.bench_function(format!("T{t}"), |b| b.iter(|| ns.solve().unwrap().iterations));
    }
    g.finish();
}

fn batch_parallel_vs_sequential(c: &mut Criterion) {
    let opts = SolverOptions::default();
    let solvers: Vec<NullspaceSolver> = (0..16)
        .map(|i| NullspaceSolver::new(gen_random_system(10, 3, 12, i as u64), opts.clone()).unwrap())
        .collect();

    let mut g = c.benchmark_group("batch_16_random_solves");
    g.sample_size(20);
    g.bench_function("run_batch", |b| {
        b.iter(|| {
            run_batch(solvers.len(), |i| solvers[i].solve().unwrap().iterations)
                .iter()
                .sum::<usize>()
        })
    });
    g.bench_function("run_batch_sequential", |b| {
        b.iter(|| {
            run_batch_sequential(solvers.len(), |i| solvers[i].solve().unwrap().iterations)
                .iter()
                .sum::<usize>()
        })
    });
    g.finish();
}

criterion_group!(
    benches,
    solver_head_to_head,
    horizon_scaling,
    batch_parallel_vs_sequential
);
criterion_main!(benches);
