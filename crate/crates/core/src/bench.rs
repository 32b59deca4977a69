//! Problem generators, closed-loop simulation, timing sweeps, and
//! performance profiles.
//!
//! Random plants are dense with spectral radius one (neutral stability),
//! bounded by `x in [-4, 4]` and `u in [-0.5, 0.5]`, and start from
//! `x0 = 0.2 e`. The mass-spring family is a chain of unit masses and unit
//! springs between walls, discretized by zero-order hold (energy conserving,
//! spectral radius one), starting from `x0 = e`.
//!
//! Sweeps report one cost per solver and instance: total solver time divided
//! by the number of Newton iterations, median over repeats. Sweep points can run
//! across worker threads (the `parallel` feature, on by default); timing runs
//! default to sequential mode to keep the medians quiet.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::ipm::{IpmError, NullspaceSolver, SolveResult, SolverOptions, SolverStatus};
use crate::problem::MpcProblem;
use crate::reference::ClassicalSolver;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("solver: {0}")]
    Solver(#[from] IpmError),
    #[error("{0}")]
    Config(String),
    #[error("csv parse error at line {line}: {reason}")]
    Csv { line: usize, reason: String },
    #[error("profile needs at least 2 solvers, got {0}")]
    NotEnoughSolvers(usize),
    #[error("solver problem sets differ; present in only some reports: {missing:?}")]
    MismatchedProblems { missing: Vec<String> },
}

/// Default zero-order-hold step for the mass-spring discretization.
pub const DEFAULT_SPRING_DT: f64 = 0.5;

/// Which solver backs a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolverKind {
    Nullspace,
    Classical,
}

impl SolverKind {
    pub fn name(&self) -> &'static str {
        match self {
            SolverKind::Nullspace => "nullspace",
            SolverKind::Classical => "classical",
        }
    }

    pub fn parse(s: &str) -> Result<Self, BenchError> {
        match s {
            "nullspace" => Ok(SolverKind::Nullspace),
            "classical" => Ok(SolverKind::Classical),
            other => Err(BenchError::Config(format!("unknown solver '{other}'"))),
        }
    }
}

/// Problem family for generation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    Random,
    MassSpring,
}

impl Family {
    pub fn name(&self) -> &'static str {
        match self {
            Family::Random => "random",
            Family::MassSpring => "mass-spring",
        }
    }
}

/// Spectral radius via the full eigenvalue set. Random dense plants
/// routinely have complex dominant pairs, so plain power iteration on `A`
/// does not settle; the exact computation is cheap at these sizes.
pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    m.complex_eigenvalues()
        .iter()
        .map(|c| c.norm())
        .fold(0.0, f64::max)
}

/// Box bounds `x in [-x_bound, x_bound]`, `u in [-u_bound, u_bound]` as
/// stage inequality rows in `A_xi x + B_ui u >= b` form.
pub fn bound_constraints(
    n_x: usize,
    n_u: usize,
    x_bound: f64,
    u_bound: f64,
) -> (DMatrix<f64>, DMatrix<f64>, DVector<f64>) {
    let m = 2 * n_x + 2 * n_u;
    let mut a_xi = DMatrix::zeros(m, n_x);
    let mut b_ui = DMatrix::zeros(m, n_u);
    let mut b = DVector::zeros(m);
    for i in 0..n_x {
        a_xi[(i, i)] = 1.0; // x_i >= -x_bound
        b[i] = -x_bound;
        a_xi[(n_x + i, i)] = -1.0; // -x_i >= -x_bound
        b[n_x + i] = -x_bound;
    }
    for j in 0..n_u {
        b_ui[(2 * n_x + j, j)] = 1.0;
        b[2 * n_x + j] = -u_bound;
        b_ui[(2 * n_x + n_u + j, j)] = -1.0;
        b[2 * n_x + n_u + j] = -u_bound;
    }
    (a_xi, b_ui, b)
}

/// Random neutrally-stable dense plant with box bounds and `x0 = 0.2 e`.
/// The seed fully determines the instance.
pub fn gen_random_system(n_x: usize, n_u: usize, horizon: usize, seed: u64) -> MpcProblem {
    assert!(n_u >= 1 && n_u <= n_x);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut a_xe = DMatrix::from_fn(n_x, n_x, |_, _| rng.random_range(-1.0..1.0));
    let rho = spectral_radius(&a_xe);
    a_xe /= rho;
    let b_ue = DMatrix::from_fn(n_x, n_u, |_, _| rng.random_range(-1.0..1.0));
    let (a_xi, b_ui, b_xui) = bound_constraints(n_x, n_u, 4.0, 0.5);

    MpcProblem {
        a_xe,
        b_ue,
        q_cost: DMatrix::identity(n_x, n_x),
        u_cost: DMatrix::identity(n_u, n_u),
        s_cost: DMatrix::zeros(n_x, n_u),
        q_lin: DVector::zeros(n_x),
        r_lin: DVector::zeros(n_u),
        qf_cost: DMatrix::identity(n_x, n_x),
        qf_lin: DVector::zeros(n_x),
        a_xi,
        b_ui,
        b_xui: b_xui.clone(),
        b_xui_f: b_xui,
        c: DVector::zeros(n_x),
        horizon,
        x0: DVector::from_element(n_x, 0.2),
    }
}

/// Chain of `masses` unit masses with unit springs between neighbours and to
/// the walls, actuated on the first `n_u` masses, discretized by zero-order
/// hold over `dt`. States are positions then velocities (`n_x = 2 masses`),
/// `x0 = e`, with the same box bounds as the random family.
pub fn gen_mass_spring(masses: usize, n_u: usize, horizon: usize, dt: f64) -> MpcProblem {
    assert!(masses >= 2 && n_u >= 1 && n_u <= masses);
    let n_x = 2 * masses;

    // Continuous dynamics [[0, I], [K, 0]] with K = tridiag(1, -2, 1).
    let mut a_cont = DMatrix::zeros(n_x, n_x);
    for i in 0..masses {
        a_cont[(i, masses + i)] = 1.0;
        a_cont[(masses + i, i)] = -2.0;
        if i > 0 {
            a_cont[(masses + i, i - 1)] = 1.0;
        }
        if i + 1 < masses {
            a_cont[(masses + i, i + 1)] = 1.0;
        }
    }
    let mut b_cont = DMatrix::zeros(n_x, n_u);
    for j in 0..n_u {
        b_cont[(masses + j, j)] = 1.0;
    }

    // ZOH via the augmented exponential: exp([[A, B], [0, 0]] dt).
    let mut aug = DMatrix::zeros(n_x + n_u, n_x + n_u);
    aug.view_mut((0, 0), (n_x, n_x)).copy_from(&a_cont);
    aug.view_mut((0, n_x), (n_x, n_u)).copy_from(&b_cont);
    let e = (aug * dt).exp();
    let a_xe = e.view((0, 0), (n_x, n_x)).clone_owned();
    let b_ue = e.view((0, n_x), (n_x, n_u)).clone_owned();

    let (a_xi, b_ui, b_xui) = bound_constraints(n_x, n_u, 4.0, 0.5);
    MpcProblem {
        a_xe,
        b_ue,
        q_cost: DMatrix::identity(n_x, n_x),
        u_cost: DMatrix::identity(n_u, n_u),
        s_cost: DMatrix::zeros(n_x, n_u),
        q_lin: DVector::zeros(n_x),
        r_lin: DVector::zeros(n_u),
        qf_cost: DMatrix::identity(n_x, n_x),
        qf_lin: DVector::zeros(n_x),
        a_xi,
        b_ui,
        b_xui: b_xui.clone(),
        b_xui_f: b_xui,
        c: DVector::zeros(n_x),
        horizon,
        x0: DVector::from_element(n_x, 1.0),
    }
}

/// Map `f` over `0..n`, across worker threads when the `parallel` feature is
/// enabled. Results keep index order either way.
#[cfg(feature = "parallel")]
pub fn run_batch<T: Send, F: Fn(usize) -> T + Sync + Send>(n: usize, f: F) -> Vec<T> {
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

/// Sequential fallback used when the `parallel` feature is disabled.
#[cfg(not(feature = "parallel"))]
pub fn run_batch<T: Send, F: Fn(usize) -> T + Sync + Send>(n: usize, f: F) -> Vec<T> {
    (0..n).map(f).collect()
}

/// Always-sequential variant, for timing runs and baseline comparisons.
pub fn run_batch_sequential<T, F: Fn(usize) -> T>(n: usize, f: F) -> Vec<T> {
    (0..n).map(f).collect()
}

enum LoopSolver {
    Null(Box<NullspaceSolver>),
    Classical(Box<ClassicalSolver>),
}

impl LoopSolver {
    fn build(prob: MpcProblem, kind: SolverKind, opts: &SolverOptions) -> Result<Self, IpmError> {
        Ok(match kind {
            SolverKind::Nullspace => {
                LoopSolver::Null(Box::new(NullspaceSolver::new(prob, opts.clone())?))
            }
            SolverKind::Classical => {
                LoopSolver::Classical(Box::new(ClassicalSolver::new(prob, opts.clone())?))
            }
        })
    }

    fn solve_from(&mut self, x0: &DVector<f64>) -> Result<SolveResult, IpmError> {
        match self {
            LoopSolver::Null(s) => s.solve_from(x0),
            LoopSolver::Classical(s) => s.solve_from(x0),
        }
    }
}

/// One step of a closed-loop run.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub step: usize,
    pub status: SolverStatus,
    pub iterations: usize,
    pub solve_us: f64,
    pub cost: f64,
    /// Control actually applied to the plant (original controls only).
    pub applied_u: DVector<f64>,
    /// State before the step.
    pub state: DVector<f64>,
    pub max_virtual: f64,
    pub max_abs_u: f64,
    pub max_abs_x: f64,
}

#[derive(Debug, Clone)]
pub struct ClosedLoopLog {
    pub steps: Vec<StepRecord>,
    /// Set when a step failed and the loop aborted early.
    pub aborted: bool,
}

/// Receding-horizon simulation: solve, apply the first-stage original
/// control, propagate `x <- A x + B u + c`, repeat. A solver failure aborts
/// with the partial log.
pub fn closed_loop(
    prob: &MpcProblem,
    kind: SolverKind,
    opts: &SolverOptions,
    n_steps: usize,
) -> Result<ClosedLoopLog, BenchError> {
    let mut solver = LoopSolver::build(prob.clone(), kind, opts)?;
    let mut x = prob.x0.clone();
    let mut steps = Vec::with_capacity(n_steps);

    for step in 0..n_steps {
        let tick = Instant::now();
        let res = solver.solve_from(&x)?;
        let solve_us = tick.elapsed().as_secs_f64() * 1e6;

        let u = res.u_trajectory[0].clone();
        let record = StepRecord {
            step,
            status: res.status,
            iterations: res.iterations,
            solve_us,
            cost: res.objective,
            max_virtual: res.max_virtual_control,
            max_abs_u: u.amax(),
            max_abs_x: x.amax(),
            applied_u: u.clone(),
            state: x.clone(),
        };
        let failed = !matches!(record.status, SolverStatus::Converged);
        steps.push(record);
        if failed {
            return Ok(ClosedLoopLog {
                steps,
                aborted: true,
            });
        }

        x = &prob.a_xe * &x + &prob.b_ue * &u + &prob.c;
    }
    Ok(ClosedLoopLog {
        steps,
        aborted: false,
    })
}

impl ClosedLoopLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "step,status,iterations,solve_us,cost,max_abs_u,max_abs_x,max_virtual\n",
        );
        for s in &self.steps {
            out.push_str(&format!(
                "{},{},{},{:.1},{:.9e},{:.9e},{:.9e},{:.3e}\n",
                s.step,
                status_name(s.status),
                s.iterations,
                s.solve_us,
                s.cost,
                s.max_abs_u,
                s.max_abs_x,
                s.max_virtual
            ));
        }
        out
    }
}

fn status_name(s: SolverStatus) -> &'static str {
    match s {
        SolverStatus::Converged => "converged",
        SolverStatus::IterLimit => "iter-limit",
        SolverStatus::NumericalFailure { .. } => "numerical-failure",
    }
}

/// Sweep axis: which dimension the grid varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    ControlCount,
    Horizon,
    StateCount,
}

impl SweepAxis {
    pub fn parse(s: &str) -> Result<Self, BenchError> {
        match s {
            "nu" => Ok(SweepAxis::ControlCount),
            "T" | "t" => Ok(SweepAxis::Horizon),
            "nx" => Ok(SweepAxis::StateCount),
            other => Err(BenchError::Config(format!("unknown axis '{other}'"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SweepConfig {
    pub axis: SweepAxis,
    pub grid: Vec<usize>,
    pub n_x: usize,
    pub n_u: usize,
    pub horizon: usize,
    pub seed: u64,
    pub solvers: Vec<SolverKind>,
    /// Median over this many timed solves per grid point.
    pub repeats: usize,
    /// Run sweep points across worker threads. Timing defaults to off.
    pub parallel: bool,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            axis: SweepAxis::Horizon,
            grid: vec![10, 20],
            n_x: 8,
            n_u: 2,
            horizon: 10,
            seed: 0,
            solvers: vec![SolverKind::Nullspace, SolverKind::Classical],
            repeats: 5,
            parallel: false,
        }
    }
}

/// One sweep measurement. Timing columns are `setup_us`, `total_us`, and
/// `time_per_iter_us`; everything else is deterministic in (config, seed).
#[derive(Debug, Clone)]
pub struct SweepRow {
    pub family: String,
    pub n_x: usize,
    pub n_u: usize,
    pub horizon: usize,
    pub solver: String,
    pub iters: usize,
    pub time_per_iter_us: f64,
    pub total_us: f64,
    pub setup_us: f64,
    pub status: String,
}

#[derive(Debug, Clone, Default)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    if v.is_empty() {
        return f64::NAN;
    }
    let mid = v.len() / 2;
    if v.len().is_multiple_of(2) {
        0.5 * (v[mid - 1] + v[mid])
    } else {
        v[mid]
    }
}

fn sweep_point(cfg: &SweepConfig, opts: &SolverOptions, idx: usize) -> Vec<SweepRow> {
    let value = cfg.grid[idx];
    let (n_x, n_u, horizon) = match cfg.axis {
        SweepAxis::ControlCount => (cfg.n_x, value, cfg.horizon),
        SweepAxis::Horizon => (cfg.n_x, cfg.n_u, value),
        SweepAxis::StateCount => (value, cfg.n_u, cfg.horizon),
    };
    let prob = gen_random_system(n_x, n_u, horizon, cfg.seed.wrapping_add(idx as u64));

    let mut rows = Vec::new();
    for kind in &cfg.solvers {
        let tick = Instant::now();
        let solver = LoopSolver::build(prob.clone(), *kind, opts);
        let setup_us = tick.elapsed().as_secs_f64() * 1e6;
        let mut solver = match solver {
            Ok(s) => s,
            Err(e) => {
                rows.push(SweepRow {
                    family: Family::Random.name().into(),
                    n_x,
                    n_u,
                    horizon,
                    solver: kind.name().into(),
                    iters: 0,
                    time_per_iter_us: f64::NAN,
                    total_us: f64::NAN,
                    setup_us,
                    status: format!("setup-error: {e}"),
                });
                continue;
            }
        };

        let mut per_iter = Vec::with_capacity(cfg.repeats);
        let mut totals = Vec::with_capacity(cfg.repeats);
        let mut iters = 0usize;
        let mut status = "converged".to_string();
        // One block Cholesky per iteration for the null-space path, two for
        // the classical one; any drift is a bug worth surfacing in the row.
        let facts_per_iter = match kind {
            SolverKind::Nullspace => 1,
            SolverKind::Classical => 2,
        };
        for _ in 0..cfg.repeats.max(1) {
            let tick = Instant::now();
            match solver.solve_from(&prob.x0) {
                Ok(res) => {
                    let total = tick.elapsed().as_secs_f64() * 1e6;
                    iters = res.iterations;
                    if res.iterations > 0 {
                        per_iter.push(total / res.iterations as f64);
                    }
                    totals.push(total);
                    if !matches!(res.status, SolverStatus::Converged) {
                        status = status_name(res.status).into();
                    } else if res.factorizations != facts_per_iter * res.iterations {
                        status = "counter-mismatch".into();
                    }
                }
                Err(e) => {
                    status = format!("error: {e}");
                }
            }
        }
        rows.push(SweepRow {
            family: Family::Random.name().into(),
            n_x,
            n_u,
            horizon,
            solver: kind.name().into(),
            iters,
            time_per_iter_us: median(per_iter),
            total_us: median(totals),
            setup_us,
            status,
        });
    }
    rows
}

/// Run the sweep over the grid; per-point failures become status rows and
/// the sweep continues.
pub fn timing_sweep(cfg: &SweepConfig, opts: &SolverOptions) -> Result<SweepReport, BenchError> {
    if cfg.grid.is_empty() {
        return Err(BenchError::Config("sweep grid is empty".into()));
    }
    let rows_per_point: Vec<Vec<SweepRow>> = if cfg.parallel {
        run_batch(cfg.grid.len(), |idx| sweep_point(cfg, opts, idx))
    } else {
        run_batch_sequential(cfg.grid.len(), |idx| sweep_point(cfg, opts, idx))
    };
    Ok(SweepReport {
        rows: rows_per_point.into_iter().flatten().collect(),
    })
}

pub const SWEEP_CSV_HEADER: &str =
    "family,n_x,n_u,T,solver,iters,time_per_iter_us,total_us,setup_us,status";

impl SweepReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(SWEEP_CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{:.3},{:.3},{:.3},{}\n",
                r.family,
                r.n_x,
                r.n_u,
                r.horizon,
                r.solver,
                r.iters,
                r.time_per_iter_us,
                r.total_us,
                r.setup_us,
                r.status
            ));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self, BenchError> {
        let mut rows = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if i == 0 {
                if line.trim() != SWEEP_CSV_HEADER {
                    return Err(BenchError::Csv {
                        line: 1,
                        reason: format!("unexpected header '{line}'"),
                    });
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != 10 {
                return Err(BenchError::Csv {
                    line: i + 1,
                    reason: format!("expected 10 fields, got {}", parts.len()),
                });
            }
            let parse_usize = |s: &str, what: &str| {
                s.parse::<usize>().map_err(|_| BenchError::Csv {
                    line: i + 1,
                    reason: format!("bad {what} '{s}'"),
                })
            };
            let parse_f64 = |s: &str, what: &str| {
                s.parse::<f64>().map_err(|_| BenchError::Csv {
                    line: i + 1,
                    reason: format!("bad {what} '{s}'"),
                })
            };
            rows.push(SweepRow {
                family: parts[0].into(),
                n_x: parse_usize(parts[1], "n_x")?,
                n_u: parse_usize(parts[2], "n_u")?,
                horizon: parse_usize(parts[3], "T")?,
                solver: parts[4].into(),
                iters: parse_usize(parts[5], "iters")?,
                time_per_iter_us: parse_f64(parts[6], "time_per_iter_us")?,
                total_us: parse_f64(parts[7], "total_us")?,
                setup_us: parse_f64(parts[8], "setup_us")?,
                status: parts[9].into(),
            });
        }
        Ok(Self { rows })
    }
}

/// One point of a performance profile: fraction of problems a solver handles
/// within `ratio` times the best per-problem cost.
#[derive(Debug, Clone, PartialEq)]
pub struct ProfilePoint {
    pub solver: String,
    pub ratio: f64,
    pub fraction: f64,
}

/// Performance profile over time-per-Newton-iteration, from one or more
/// sweep reports. All solvers must cover the same problem set.
pub fn perf_profile(reports: &[SweepReport]) -> Result<Vec<ProfilePoint>, BenchError> {
    use std::collections::BTreeMap;

    // (problem key) -> solver -> cost.
    let mut table: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
    let mut solvers: Vec<String> = Vec::new();
    for report in reports {
        for row in &report.rows {
            let key = format!("{}/{}x{}x{}", row.family, row.n_x, row.n_u, row.horizon);
            table
                .entry(key)
                .or_default()
                .insert(row.solver.clone(), row.time_per_iter_us);
            if !solvers.contains(&row.solver) {
                solvers.push(row.solver.clone());
            }
        }
    }
    if solvers.len() < 2 {
        return Err(BenchError::NotEnoughSolvers(solvers.len()));
    }

    let mut missing = Vec::new();
    for (key, per_solver) in &table {
        for s in &solvers {
            if !per_solver.contains_key(s) {
                missing.push(format!("{key} missing {s}"));
            }
        }
    }
    if !missing.is_empty() {
        return Err(BenchError::MismatchedProblems { missing });
    }

    let n_problems = table.len();
    let mut points = Vec::new();
    for s in &solvers {
        let mut ratios: Vec<f64> = table
            .values()
            .map(|per_solver| {
                let best = per_solver.values().cloned().fold(f64::INFINITY, f64::min);
                per_solver[s] / best
            })
            .collect();
        ratios.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for (i, r) in ratios.iter().enumerate() {
            points.push(ProfilePoint {
                solver: s.clone(),
                ratio: *r,
                fraction: (i + 1) as f64 / n_problems as f64,
            });
        }
    }
    Ok(points)
}

pub fn profile_to_csv(points: &[ProfilePoint]) -> String {
    let mut out = String::from("solver,ratio,fraction\n");
    for p in points {
        out.push_str(&format!("{},{:.6},{:.6}\n", p.solver, p.ratio, p.fraction));
    }
    out
}
