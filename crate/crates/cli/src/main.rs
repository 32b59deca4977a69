//! `nsmpc`: generate receding-horizon QP instances, solve them, simulate
//! closed loops, and run timing sweeps.
//!
//! Exit codes: 0 success, 1 usage error, 2 solver failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nsmpc_core::bench::{
    closed_loop, gen_mass_spring, gen_random_system, perf_profile, profile_to_csv, timing_sweep,
    SolverKind, SweepAxis, SweepConfig, SweepReport, DEFAULT_SPRING_DT,
};
use nsmpc_core::ipm::{NullspaceSolver, SolveResult, SolverOptions, SolverStatus};
use nsmpc_core::problem::MpcProblem;
use nsmpc_core::reference::ClassicalSolver;

#[derive(Parser)]
#[command(name = "nsmpc", version, about = "Structured interior-point MPC QP solver")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ProblemArgs {
    /// Problem family: random | mass-spring | file.
    #[arg(long, default_value = "random")]
    family: String,
    /// State dimension (mass-spring: must be even, masses = nx / 2).
    #[arg(long, default_value_t = 8)]
    nx: usize,
    /// Control dimension.
    #[arg(long, default_value_t = 2)]
    nu: usize,
    /// Horizon length.
    #[arg(long = "T", default_value_t = 10)]
    horizon: usize,
    /// Seed for the random family.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Problem JSON file (family = file).
    #[arg(long)]
    problem: Option<PathBuf>,
    /// Mass-spring discretization step.
    #[arg(long, default_value_t = DEFAULT_SPRING_DT)]
    dt: f64,
}

#[derive(Args, Clone)]
struct SolveArgs {
    /// Solver: nullspace | classical.
    #[arg(long, default_value = "nullspace")]
    solver: String,
    /// Solver options as JSON, e.g. '{"eps": 1e-9, "i_max": 50}'.
    #[arg(long)]
    opts: Option<String>,
    /// Output format: csv | json (text summary when omitted for solve).
    #[arg(long, default_value = "json")]
    format: String,
    /// Output path (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a problem instance and write its JSON.
    Gen {
        #[command(flatten)]
        problem: ProblemArgs,
        /// Output path (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Solve one QP instance.
    Solve {
        #[command(flatten)]
        problem: ProblemArgs,
        #[command(flatten)]
        solve: SolveArgs,
    },
    /// Closed-loop simulation: solve, apply the first control, propagate.
    Simulate {
        #[command(flatten)]
        problem: ProblemArgs,
        #[command(flatten)]
        solve: SolveArgs,
        /// Number of control steps.
        #[arg(long, default_value_t = 50)]
        steps: usize,
    },
    /// Timing sweep over a grid, reporting time per Newton iteration.
    Sweep {
        #[command(flatten)]
        problem: ProblemArgs,
        /// Axis to vary: nu | T | nx.
        #[arg(long, default_value = "T")]
        axis: String,
        /// Comma-separated grid values, e.g. 10,20,40.
        #[arg(long)]
        grid: String,
        /// Comma-separated solvers.
        #[arg(long, default_value = "nullspace,classical")]
        solver: String,
        /// Timed repeats per grid point (median is reported).
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        /// Run grid points across worker threads (off by default: timing).
        #[arg(long)]
        parallel: bool,
        /// Solver options as JSON.
        #[arg(long)]
        opts: Option<String>,
        /// Output path (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Dolan-More performance profile from sweep CSV reports.
    Profile {
        /// Sweep CSV files.
        files: Vec<PathBuf>,
        /// Output path (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Solver(String),
}

fn usage<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Usage(e.to_string())
}

fn build_problem(args: &ProblemArgs) -> Result<MpcProblem, CliError> {
    match args.family.as_str() {
        "random" => {
            if args.nu == 0 || args.nu > args.nx {
                return Err(CliError::Usage(format!(
                    "need 1 <= nu <= nx, got nu = {}, nx = {}",
                    args.nu, args.nx
                )));
            }
            Ok(gen_random_system(args.nx, args.nu, args.horizon, args.seed))
        }
        "mass-spring" => {
            if !args.nx.is_multiple_of(2) || args.nx < 4 {
                return Err(CliError::Usage(format!(
                    "mass-spring needs an even nx >= 4 (nx = 2 * masses), got {}",
                    args.nx
                )));
            }
            let masses = args.nx / 2;
            if args.nu == 0 || args.nu > masses {
                return Err(CliError::Usage(format!(
                    "mass-spring needs 1 <= nu <= masses = {masses}, got {}",
                    args.nu
                )));
            }
            Ok(gen_mass_spring(masses, args.nu, args.horizon, args.dt))
        }
        "file" => {
            let path = args.problem.as_ref().ok_or_else(|| {
                CliError::Usage("--family file requires --problem <path>".into())
            })?;
            MpcProblem::from_json_file(path).map_err(usage)
        }
        other => Err(CliError::Usage(format!(
            "unknown family '{other}' (random | mass-spring | file)"
        ))),
    }
}

fn parse_opts(text: &Option<String>) -> Result<SolverOptions, CliError> {
    match text {
        None => Ok(SolverOptions::default()),
        Some(t) => serde_json::from_str(t).map_err(usage),
    }
}

fn write_out(out: &Option<PathBuf>, content: &str) -> Result<(), CliError> {
    match out {
        Some(path) => std::fs::write(path, content).map_err(usage),
        None => {
            print!("{content}");
            Ok(())
        }
    }
}

fn status_str(s: SolverStatus) -> String {
    match s {
        SolverStatus::Converged => "converged".into(),
        SolverStatus::IterLimit => "iter-limit".into(),
        SolverStatus::NumericalFailure { block } => format!("numerical-failure(block {block})"),
    }
}

fn result_json(res: &SolveResult) -> serde_json::Value {
    serde_json::json!({
        "status": status_str(res.status),
        "iterations": res.iterations,
        "objective": res.objective,
        "final_residual": res.final_residual,
        "mu": res.mu,
        "factorizations": res.factorizations,
        "max_eq_violation": res.max_eq_violation,
        "max_virtual_control": res.max_virtual_control,
        "u_trajectory": res.u_trajectory.iter().map(|u| u.as_slice().to_vec()).collect::<Vec<_>>(),
    })
}

fn run_solve(problem: &ProblemArgs, solve: &SolveArgs) -> Result<(), CliError> {
    let prob = build_problem(problem)?;
    let opts = parse_opts(&solve.opts)?;
    let res = match solve.solver.as_str() {
        "nullspace" => NullspaceSolver::new(prob, opts)
            .and_then(|s| s.solve())
            .map_err(|e| CliError::Solver(e.to_string()))?,
        "classical" => ClassicalSolver::new(prob, opts)
            .and_then(|s| s.solve())
            .map_err(|e| CliError::Solver(e.to_string()))?,
        other => {
            return Err(CliError::Usage(format!(
                "unknown solver '{other}' (nullspace | classical)"
            )))
        }
    };

    let content = match solve.format.as_str() {
        "json" => format!("{:#}\n", result_json(&res)),
        "csv" => {
            let mut s = String::from("status,iterations,objective,final_residual,mu,factorizations\n");
            s.push_str(&format!(
                "{},{},{:.9e},{:.3e},{:.3e},{}\n",
                status_str(res.status),
                res.iterations,
                res.objective,
                res.final_residual,
                res.mu,
                res.factorizations
            ));
            s
        }
        other => return Err(CliError::Usage(format!("unknown format '{other}'"))),
    };
    write_out(&solve.out, &content)?;

    if res.status != SolverStatus::Converged {
        return Err(CliError::Solver(format!(
            "solver finished with status {}",
            status_str(res.status)
        )));
    }
    Ok(())
}

fn run_simulate(problem: &ProblemArgs, solve: &SolveArgs, steps: usize) -> Result<(), CliError> {
    let prob = build_problem(problem)?;
    let opts = parse_opts(&solve.opts)?;
    let kind = SolverKind::parse(&solve.solver).map_err(usage)?;
    let log = closed_loop(&prob, kind, &opts, steps).map_err(|e| CliError::Solver(e.to_string()))?;

    let content = match solve.format.as_str() {
        "csv" => log.to_csv(),
        "json" => {
            let steps: Vec<_> = log
                .steps
                .iter()
                .map(|s| {
                    serde_json::json!({
                        "step": s.step,
                        "status": status_str(s.status),
                        "iterations": s.iterations,
                        "solve_us": s.solve_us,
                        "cost": s.cost,
                        "applied_u": s.applied_u.as_slice().to_vec(),
                        "state": s.state.as_slice().to_vec(),
                        "max_virtual": s.max_virtual,
                    })
                })
                .collect();
            format!(
                "{:#}\n",
                serde_json::json!({"aborted": log.aborted, "steps": steps})
            )
        }
        other => return Err(CliError::Usage(format!("unknown format '{other}'"))),
    };
    write_out(&solve.out, &content)?;

    if log.aborted {
        return Err(CliError::Solver("closed loop aborted on solver failure".into()));
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn run_sweep(
    problem: &ProblemArgs,
    axis: &str,
    grid: &str,
    solver: &str,
    repeats: usize,
    parallel: bool,
    opts: &Option<String>,
    out: &Option<PathBuf>,
) -> Result<(), CliError> {
    let axis = SweepAxis::parse(axis).map_err(usage)?;
    let grid: Vec<usize> = grid
        .split(',')
        .map(|s| s.trim().parse::<usize>().map_err(usage))
        .collect::<Result<_, _>>()?;
    let solvers: Vec<SolverKind> = solver
        .split(',')
        .map(|s| SolverKind::parse(s.trim()).map_err(usage))
        .collect::<Result<_, _>>()?;
    let cfg = SweepConfig {
        axis,
        grid,
        n_x: problem.nx,
        n_u: problem.nu,
        horizon: problem.horizon,
        seed: problem.seed,
        solvers,
        repeats,
        parallel,
    };
    let solver_opts = parse_opts(opts)?;
    let report = timing_sweep(&cfg, &solver_opts).map_err(|e| CliError::Solver(e.to_string()))?;
    write_out(out, &report.to_csv())
}

fn run_profile(files: &[PathBuf], out: &Option<PathBuf>) -> Result<(), CliError> {
    if files.is_empty() {
        return Err(CliError::Usage("profile needs at least one sweep CSV".into()));
    }
    let mut reports = Vec::new();
    for f in files {
        let text = std::fs::read_to_string(f).map_err(usage)?;
        reports.push(SweepReport::from_csv(&text).map_err(usage)?);
    }
    let points = perf_profile(&reports).map_err(|e| CliError::Usage(e.to_string()))?;
    write_out(out, &profile_to_csv(&points))
}

fn run(cli: Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Gen { problem, out } => {
            let prob = build_problem(problem)?;
            let json = prob.to_json_string().map_err(usage)?;
            write_out(out, &format!("{json}\n"))
        }
        Command::Solve { problem, solve } => run_solve(problem, solve),
        Command::Simulate {
            problem,
            solve,
            steps,
        } => run_simulate(problem, solve, *steps),
        Command::Sweep {
            problem,
            axis,
            grid,
            solver,
            repeats,
            parallel,
            opts,
            out,
        } => run_sweep(problem, axis, grid, solver, *repeats, *parallel, opts, out),
        Command::Profile { files, out } => run_profile(files, out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version print and exit cleanly.
            if e.use_stderr() {
                eprint!("{e}");
                return ExitCode::from(1);
            }
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Solver(msg)) => {
            eprintln!("solver error: {msg}");
            ExitCode::from(2)
        }
    }
}
