//! Primal-dual Mehrotra predictor-corrector interior-point loop on the
//! projected normal equations.
//!
//! The iterate `y` starts equality-feasible and every step is `dy = N dz`,
//! so `A_e y = b_e` holds throughout and the equality duals never enter the
//! iteration. Each Newton iteration composes
//!
//! ```text
//! N^T Phi N = N^T H N + (A_i N)^T W^{-1} Lambda (A_i N)
//! ```
//!
//! factorizes it once (block-tridiagonal Cholesky), and reuses that single
//! factor for both the predictor and the corrector solve
//! `N^T Phi N dz = N^T r1`.

use std::time::Instant;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::Augmentation;
use crate::blockla::{BlockLaError, BlockTriDiagSym};
use crate::eqinit::{factorize_ae, StructuredQrAe};
use crate::nullspace::{build_basis, build_projections, compose_projected_phi, NullBasis, Projections};
use crate::problem::{assemble_qp, objective_value, MpcProblem, StructuredQp};

#[derive(Debug, Error)]
pub enum IpmError {
    #[error("problem: {0}")]
    Problem(#[from] crate::problem::ProblemError),
    #[error("augmentation: {0}")]
    Augment(#[from] crate::augment::AugmentError),
    #[error("nullspace: {0}")]
    Nullspace(#[from] crate::nullspace::NullspaceError),
    #[error("initial point: {0}")]
    EqInit(#[from] crate::eqinit::EqInitError),
}

/// Solver options. Serialized form uses the same field names.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverOptions {
    /// Threshold on the squared projected residual norm.
    pub eps: f64,
    /// Complementarity guard: converged also requires `mu < eps_comp`.
    pub eps_comp: f64,
    /// Newton iteration limit.
    pub i_max: usize,
    /// Fraction-to-boundary factor for the applied (corrector) step.
    pub tau: f64,
    /// Condition-estimate threshold for the structured QR of `A_e`.
    pub xi: f64,
    /// Use one common step length for primal and dual.
    pub single_alpha: bool,
    /// Recover the equality duals each iteration (off by default; the
    /// primal never needs them).
    pub recover_duals: bool,
    /// Test `||r||^2 < eps` (the default) or `||r|| < eps`.
    pub squared_residual: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            eps: 1e-9,
            eps_comp: 1e-8,
            i_max: 100,
            tau: 0.995,
            xi: 10.0,
            single_alpha: false,
            recover_duals: false,
            squared_residual: true,
        }
    }
}

/// Mutable per-solve state of the interior-point iteration.
#[derive(Debug, Clone)]
pub struct IpmState {
    /// Primal iterate, always equality-feasible.
    pub y: DVector<f64>,
    /// Slacks, strictly positive.
    pub w: DVector<f64>,
    /// Inequality duals, strictly positive.
    pub lambda: DVector<f64>,
    /// Equality duals, tracked only when dual recovery is on.
    pub lambda_e: Option<DVector<f64>>,
    /// Duality measure `lambda . w / (n + m)`.
    pub mu: f64,
    /// Centering parameter of the last corrector step.
    pub sigma: f64,
    pub iter: usize,
    /// Projected residual norm per iteration.
    pub residual_history: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolverStatus {
    Converged,
    IterLimit,
    /// Cholesky breakdown; carries the failing block index.
    NumericalFailure { block: usize },
}

/// Everything a solve reports back.
#[derive(Debug, Clone)]
pub struct SolveResult {
    pub status: SolverStatus,
    /// Final primal iterate.
    pub y: DVector<f64>,
    /// Original per-stage controls, virtual entries dropped.
    pub u_trajectory: Vec<DVector<f64>>,
    pub iterations: usize,
    /// Final projected residual norm (unsquared).
    pub final_residual: f64,
    /// Final duality measure.
    pub mu: f64,
    pub objective: f64,
    /// Wall time of each Newton iteration, microseconds.
    pub iter_times_us: Vec<f64>,
    /// Block Cholesky factorizations performed.
    pub factorizations: usize,
    /// Initial-point solves performed (one per QP solve).
    pub feasible_point_solves: usize,
    /// Worst `||A_e y - b_e||_inf / (1 + ||b_e||_inf)` over all iterates.
    pub max_eq_violation: f64,
    /// Worst spread `max(lambda/w) / min(lambda/w)` of the inequality
    /// weights over the iterations: the slack conditioning the paired
    /// virtual rows could in principle degrade.
    pub worst_xi_spread: f64,
    /// Largest `|u*|` entry at the final iterate.
    pub max_virtual_control: f64,
    /// Equality duals at the final iterate, when recovery is on.
    pub lambda_e: Option<DVector<f64>>,
    pub residual_history: Vec<f64>,
}

/// `mu = lambda . w / (n + m)`, with `n` the primal dimension.
pub fn duality_measure(lambda: &DVector<f64>, w: &DVector<f64>, n_primal: usize) -> f64 {
    assert_eq!(lambda.len(), w.len(), "lambda and w length mismatch");
    if lambda.is_empty() {
        return 0.0;
    }
    lambda.dot(w) / (n_primal + lambda.len()) as f64
}

/// Standard Mehrotra centering heuristic `sigma = (mu_aff / mu)^3`,
/// clamped to `[0, 1]`.
pub fn mehrotra_sigma(mu: f64, mu_aff: f64) -> f64 {
    if mu <= 0.0 {
        return 0.0;
    }
    (mu_aff / mu).powi(3).clamp(0.0, 1.0)
}

/// Largest `alpha in (0, 1]` with `w + alpha dw >= (1 - tau) w` and
/// `lambda + alpha dlam >= (1 - tau) lambda`, returned as separate primal
/// and dual step lengths. `tau = 1` is the pure positivity boundary used to
/// measure the affine step.
pub fn step_lengths(
    w: &DVector<f64>,
    dw: &DVector<f64>,
    lambda: &DVector<f64>,
    dlam: &DVector<f64>,
    tau: f64,
) -> (f64, f64) {
    let limit = |v: &DVector<f64>, dv: &DVector<f64>| -> f64 {
        let mut alpha: f64 = 1.0;
        for k in 0..v.len() {
            if dv[k] < 0.0 {
                alpha = alpha.min(-tau * v[k] / dv[k]);
            }
        }
        alpha
    };
    (limit(w, dw), limit(lambda, dlam))
}

/// Predictor right-hand-side weights: `F = lambda + W^{-1}(lambda .* gap)`
/// with `gap = b_i - A_i y` evaluated at the current iterate.
pub fn predictor_f(lambda: &DVector<f64>, w: &DVector<f64>, gap: &DVector<f64>) -> DVector<f64> {
    DVector::from_fn(lambda.len(), |k, _| {
        lambda[k] + lambda[k] * gap[k] / w[k]
    })
}

/// Corrector weights: the predictor expression with the Mehrotra correction
/// `-dlam_aff .* dw_aff + sigma mu e` inside the `W^{-1}` term.
pub fn corrector_f(
    lambda: &DVector<f64>,
    w: &DVector<f64>,
    gap: &DVector<f64>,
    dw_aff: &DVector<f64>,
    dlam_aff: &DVector<f64>,
    sigma_mu: f64,
) -> DVector<f64> {
    DVector::from_fn(lambda.len(), |k, _| {
        lambda[k] + (lambda[k] * gap[k] - dlam_aff[k] * dw_aff[k] + sigma_mu) / w[k]
    })
}

/// Projected residual `N^T (-H y - g + A_i^T F)`. The equality-dual term of
/// `r1` vanishes under `N^T`, so it is never formed.
pub fn residual_r1(
    qp: &StructuredQp,
    basis: &NullBasis,
    y: &DVector<f64>,
    f: &DVector<f64>,
) -> DVector<f64> {
    let mut v = -qp.apply_h(y) - qp.g_vec();
    v += qp.apply_ai_transpose(f);
    basis.apply_transpose(&v)
}

/// Convergence test: squared projected residual below `eps` (strict) and
/// duality measure below the complementarity guard.
pub fn convergence_check(opts: &SolverOptions, mu: f64, proj_r1: &DVector<f64>) -> bool {
    let norm = proj_r1.norm();
    let residual_ok = if opts.squared_residual {
        norm * norm < opts.eps
    } else {
        norm < opts.eps
    };
    residual_ok && mu < opts.eps_comp
}

/// One affine (predictor) Newton direction at a given interior state.
/// Exposed so the dense Newton-KKT oracle can be compared against the
/// structured path directly.
pub struct NewtonDirections {
    pub dy: DVector<f64>,
    pub dw: DVector<f64>,
    pub dlam: DVector<f64>,
}

pub fn predictor_step(
    qp: &StructuredQp,
    basis: &NullBasis,
    proj: &Projections,
    state: &IpmState,
) -> Result<NewtonDirections, BlockLaError> {
    let gap = qp.b_i_vec() - qp.apply_ai(&state.y);
    let f = predictor_f(&state.lambda, &state.w, &gap);
    let r1 = residual_r1(qp, basis, &state.y, &f);

    let xi = DVector::from_fn(state.w.len(), |k, _| state.lambda[k] / state.w[k]);
    let mut buf = BlockTriDiagSym::zeros(basis.n_x(), basis.horizon());
    compose_projected_phi(proj, &xi, &mut buf).expect("interior state keeps xi positive");
    let factor = buf.block_cholesky()?;
    let dz = factor.solve(&r1)?;
    let dy = basis.apply(&dz);

    let k3 = &gap + &state.w;
    let dw = qp.apply_ai(&dy) - &k3;
    let dlam = DVector::from_fn(state.w.len(), |k, _| {
        -(state.lambda[k] * state.w[k] + state.lambda[k] * dw[k]) / state.w[k]
    });
    Ok(NewtonDirections { dy, dw, dlam })
}

/// Interior starting point: the equality-feasible `y0`, scale-aware slacks
/// `w = max(1, |b_i - A_i y0|)`, unit inequality duals.
fn initial_state(qp: &StructuredQp, fac: &StructuredQrAe, recover_duals: bool) -> Result<IpmState, IpmError> {
    let b_e = qp.b_e_vec();
    let y = fac.solve_feasible_point(&b_e)?;
    let gap = qp.b_i_vec() - qp.apply_ai(&y);
    let w = DVector::from_fn(gap.len(), |k, _| gap[k].abs().max(1.0));
    let lambda = DVector::from_element(gap.len(), 1.0);
    let mu = duality_measure(&lambda, &w, qp.n());
    Ok(IpmState {
        y,
        w,
        lambda,
        lambda_e: recover_duals.then(|| DVector::zeros(qp.eq_rows())),
        mu,
        sigma: 0.0,
        iter: 0,
        residual_history: Vec::new(),
    })
}

/// Run the full interior-point loop. One block Cholesky per iteration; the
/// corrector reuses the predictor's factor.
pub fn solve(
    qp: &StructuredQp,
    basis: &NullBasis,
    proj: &Projections,
    fac: &StructuredQrAe,
    opts: &SolverOptions,
) -> Result<SolveResult, IpmError> {
    let n = qp.n();
    let m = qp.m_total();
    let b_e = qp.b_e_vec();
    let b_i = qp.b_i_vec();
    let b_e_scale = 1.0 + b_e.amax();
    let g = qp.g_vec();

    let mut state = initial_state(qp, fac, opts.recover_duals)?;
    let mut buf = BlockTriDiagSym::zeros(basis.n_x(), basis.horizon());
    let mut factorizations = 0usize;
    let mut iter_times = Vec::new();
    let mut max_eq_violation: f64 = 0.0;
    let mut worst_xi_spread: f64 = 1.0;
    let mut status = SolverStatus::IterLimit;
    let mut final_residual = f64::NAN;

    for iter in 0..opts.i_max {
        let tick = Instant::now();
        state.iter = iter;
        state.mu = duality_measure(&state.lambda, &state.w, n);

        let eq_violation = (qp.apply_ae(&state.y) - &b_e).amax() / b_e_scale;
        max_eq_violation = max_eq_violation.max(eq_violation);

        // Stationarity residual for the convergence test: r1 evaluated with
        // F = lambda, i.e. N^T (-H y - g + A_i^T lambda). The predictor F
        // collapses to this at a complementary, primal-consistent point.
        let test_res = {
            let mut v = -qp.apply_h(&state.y) - &g;
            v += qp.apply_ai_transpose(&state.lambda);
            basis.apply_transpose(&v)
        };
        final_residual = test_res.norm();
        state.residual_history.push(final_residual);
        if convergence_check(opts, state.mu, &test_res) {
            status = SolverStatus::Converged;
            iter_times.push(tick.elapsed().as_secs_f64() * 1e6);
            break;
        }

        let gap = &b_i - qp.apply_ai(&state.y);
        let k3 = &gap + &state.w;

        // Compose N^T Phi N and factorize once.
        let xi = DVector::from_fn(m, |k, _| state.lambda[k] / state.w[k]);
        if m > 0 {
            worst_xi_spread = worst_xi_spread.max(xi.max() / xi.min());
        }
        compose_projected_phi(proj, &xi, &mut buf)?;
        let factor = match buf.block_cholesky() {
            Ok(f) => f,
            Err(BlockLaError::NotPositiveDefinite { block }) => {
                status = SolverStatus::NumericalFailure { block };
                iter_times.push(tick.elapsed().as_secs_f64() * 1e6);
                break;
            }
            Err(BlockLaError::Dimension { .. }) => unreachable!("buffer shape fixed"),
        };
        factorizations += 1;

        // Predictor (affine) step.
        let f_pred = predictor_f(&state.lambda, &state.w, &gap);
        let r1p = residual_r1(qp, basis, &state.y, &f_pred);
        let dz = match factor.solve(&r1p) {
            Ok(dz) => dz,
            Err(BlockLaError::NotPositiveDefinite { block }) => {
                status = SolverStatus::NumericalFailure { block };
                break;
            }
            Err(BlockLaError::Dimension { .. }) => unreachable!(),
        };
        let dy_aff = basis.apply(&dz);
        let dw_aff = qp.apply_ai(&dy_aff) - &k3;
        let dlam_aff = DVector::from_fn(m, |k, _| {
            -(state.lambda[k] * (state.w[k] + dw_aff[k])) / state.w[k]
        });

        // Affine step length at the pure positivity boundary fixes sigma.
        let (ap_aff, ad_aff) = step_lengths(&state.w, &dw_aff, &state.lambda, &dlam_aff, 1.0);
        let mu_aff = if m == 0 {
            0.0
        } else {
            let mut dot = 0.0;
            for k in 0..m {
                dot += (state.lambda[k] + ad_aff * dlam_aff[k]) * (state.w[k] + ap_aff * dw_aff[k]);
            }
            dot / (n + m) as f64
        };
        let sigma = mehrotra_sigma(state.mu, mu_aff);
        state.sigma = sigma;
        let sigma_mu = sigma * state.mu;

        // Corrector: same factorization, corrected right-hand side.
        let f_corr = corrector_f(&state.lambda, &state.w, &gap, &dw_aff, &dlam_aff, sigma_mu);
        let r1c = residual_r1(qp, basis, &state.y, &f_corr);
        let dz = match factor.solve(&r1c) {
            Ok(dz) => dz,
            Err(BlockLaError::NotPositiveDefinite { block }) => {
                status = SolverStatus::NumericalFailure { block };
                break;
            }
            Err(BlockLaError::Dimension { .. }) => unreachable!(),
        };
        let dy = basis.apply(&dz);
        let dw = qp.apply_ai(&dy) - &k3;
        let dlam = DVector::from_fn(m, |k, _| {
            -(state.lambda[k] * state.w[k] - sigma_mu
                + dlam_aff[k] * dw_aff[k]
                + state.lambda[k] * dw[k])
                / state.w[k]
        });

        let (mut ap, mut ad) = step_lengths(&state.w, &dw, &state.lambda, &dlam, opts.tau);
        if opts.single_alpha {
            let a = ap.min(ad);
            ap = a;
            ad = a;
        }

        if opts.recover_duals {
            // A_e^T dlam_e = Phi dy - r1 with the full (unprojected) r1.
            let lam_e = state.lambda_e.as_ref().expect("allocated at init");
            let ai_dy = qp.apply_ai(&dy);
            let xi_dy = DVector::from_fn(m, |k, _| xi[k] * ai_dy[k]);
            let phi_dy = qp.apply_h(&dy) + qp.apply_ai_transpose(&xi_dy);
            let mut r1_full = -qp.apply_h(&state.y) - &g;
            r1_full += qp.apply_ae_transpose(lam_e);
            r1_full += qp.apply_ai_transpose(&f_corr);
            let rhs = phi_dy - r1_full;
            let dlam_e = fac.solve_dual(&rhs)?;
            if let Some(le) = state.lambda_e.as_mut() {
                le.axpy(ad, &dlam_e, 1.0);
            }
        }

        state.y.axpy(ap, &dy, 1.0);
        state.w.axpy(ap, &dw, 1.0);
        state.lambda.axpy(ad, &dlam, 1.0);
        debug_assert!(
            m == 0 || (state.w.min() > 0.0 && state.lambda.min() > 0.0),
            "fraction-to-boundary keeps w, lambda strictly positive"
        );

        iter_times.push(tick.elapsed().as_secs_f64() * 1e6);
    }

    let iterations = state.residual_history.len().saturating_sub(
        matches!(status, SolverStatus::Converged) as usize,
    );
    state.mu = duality_measure(&state.lambda, &state.w, n);
    let objective = objective_value(qp, &state.y).expect("state length fixed");

    Ok(SolveResult {
        status,
        u_trajectory: qp.original_controls(&state.y),
        max_virtual_control: qp.max_virtual_control(&state.y),
        iterations,
        final_residual,
        mu: state.mu,
        objective,
        iter_times_us: iter_times,
        factorizations,
        feasible_point_solves: 1,
        max_eq_violation,
        worst_xi_spread,
        lambda_e: state.lambda_e.clone(),
        residual_history: state.residual_history.clone(),
        y: state.y,
    })
}

/// A null-space solver bound to one plant: all x0-independent setup (the
/// augmentation, basis, projections, and the structured QR of `A_e`) is
/// done once and shared across control steps.
pub struct NullspaceSolver {
    prob: MpcProblem,
    opts: SolverOptions,
    aug: Augmentation,
    qp: StructuredQp,
    basis: NullBasis,
    proj: Projections,
    fac: StructuredQrAe,
}

impl NullspaceSolver {
    pub fn new(prob: MpcProblem, opts: SolverOptions) -> Result<Self, IpmError> {
        prob.validate()?;
        let aug = Augmentation::build(&prob.b_ue)?;
        let qp = assemble_qp(&prob, &aug)?;
        let basis = build_basis(&aug, &prob.a_xe, prob.horizon)?;
        let proj = build_projections(&basis, &qp)?;
        let fac = factorize_ae(&aug, &prob.a_xe, prob.horizon, opts.xi);
        Ok(Self {
            prob,
            opts,
            aug,
            qp,
            basis,
            proj,
            fac,
        })
    }

    pub fn qp(&self) -> &StructuredQp {
        &self.qp
    }

    pub fn basis(&self) -> &NullBasis {
        &self.basis
    }

    pub fn projections(&self) -> &Projections {
        &self.proj
    }

    pub fn factorization(&self) -> &StructuredQrAe {
        &self.fac
    }

    pub fn options(&self) -> &SolverOptions {
        &self.opts
    }

    pub fn problem(&self) -> &MpcProblem {
        &self.prob
    }

    pub fn solve(&self) -> Result<SolveResult, IpmError> {
        solve(&self.qp, &self.basis, &self.proj, &self.fac, &self.opts)
    }

    /// Re-solve from a new measured state. Only the x0-dependent vectors of
    /// the QP change; projections and factorizations are reused.
    pub fn solve_from(&mut self, x0: &DVector<f64>) -> Result<SolveResult, IpmError> {
        self.prob.x0 = x0.clone();
        self.qp = assemble_qp(&self.prob, &self.aug)?;
        self.solve()
    }
}
