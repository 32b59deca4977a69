//! Reference solvers: the classical normal-equations interior-point method
//! and a dense Newton-KKT oracle for small instances.
//!
//! The classical path runs on the original (unaugmented) QP and factors two
//! matrices per Newton iteration: the stage-block-diagonal
//! `Phi = H + A_i^T W^{-1} Lambda A_i` and the block-tridiagonal Schur
//! complement `A_e Phi^{-1} A_e^T`. The dual step comes first,
//!
//! ```text
//! A_e Phi^{-1} A_e^T dnu = -r2 - A_e Phi^{-1} r1,
//! ```
//!
//! then the primal is recovered as `dy = Phi^{-1}(r1 + A_e^T dnu)`. This is
//! the two-factorization baseline the null-space solver is measured against.

use std::time::Instant;

use nalgebra::linalg::Cholesky;
use nalgebra::{DMatrix, DVector, Dyn};
use thiserror::Error;

use crate::blockla::{BlockLaError, BlockTriDiagSym};
use crate::ipm::{
    corrector_f, duality_measure, mehrotra_sigma, predictor_f, step_lengths, IpmError,
    SolveResult, SolverOptions, SolverStatus,
};
use crate::problem::{assemble_qp_original, objective_value, MpcProblem, StructuredQp};

#[derive(Debug, Error)]
pub enum ReferenceError {
    #[error("dense KKT system of dimension {dim} exceeds the {limit} oracle guard")]
    TooLarge { dim: usize, limit: usize },
    #[error("singular dense KKT system")]
    Singular,
    #[error("state vector {what} has length {got}, expected {expected}")]
    BadLength {
        what: &'static str,
        expected: usize,
        got: usize,
    },
}

/// Stage-block-diagonal factorization of `Phi = H + A_i^T Xi A_i`.
///
/// Group 0 holds `u(0)`, groups `1..T-1` the contiguous `(x, u)` pairs, and
/// group `T` the terminal state.
struct PhiFactor {
    factors: Vec<Cholesky<f64, Dyn>>,
    offsets: Vec<usize>,
    sizes: Vec<usize>,
}

impl PhiFactor {
    fn build(qp: &StructuredQp, xi: &DVector<f64>) -> Result<Self, usize> {
        let n_x = qp.n_x();
        let n_c = qp.n_c();
        let t = qp.horizon();
        let ms = qp.m_stage();

        let mut factors = Vec::with_capacity(t + 1);
        let mut offsets = Vec::with_capacity(t + 1);
        let mut sizes = Vec::with_capacity(t + 1);

        let scale_rows = |m: &DMatrix<f64>, w: nalgebra::DVectorView<f64>| -> DMatrix<f64> {
            let mut out = m.clone();
            for (i, mut row) in out.row_iter_mut().enumerate() {
                row *= w[i];
            }
            out
        };

        // Group 0: U + B_i^T Xi(0) B_i.
        let w0 = xi.rows(0, ms);
        let scaled = scale_rows(qp.ai_u(), w0);
        let block0 = qp.u_weight() + qp.ai_u().transpose() * scaled;
        factors.push(block0.cholesky().ok_or(0usize)?);
        offsets.push(0);
        sizes.push(n_c);

        // Interior groups (x(tau), u(tau)).
        for tau in 1..t {
            let w = xi.rows(tau * ms, ms);
            let sx = scale_rows(qp.ai_x(), w);
            let su = scale_rows(qp.ai_u(), w);
            let xx = qp.q_weight() + qp.ai_x().transpose() * &sx;
            let xu = qp.s_cross() + qp.ai_x().transpose() * &su;
            let uu = qp.u_weight() + qp.ai_u().transpose() * &su;
            let mut block = DMatrix::zeros(n_x + n_c, n_x + n_c);
            block.view_mut((0, 0), (n_x, n_x)).copy_from(&xx);
            block.view_mut((0, n_x), (n_x, n_c)).copy_from(&xu);
            block
                .view_mut((n_x, 0), (n_c, n_x))
                .copy_from(&xu.transpose());
            block.view_mut((n_x, n_x), (n_c, n_c)).copy_from(&uu);
            factors.push(block.cholesky().ok_or(tau)?);
            offsets.push(qp.state_offset(tau));
            sizes.push(n_x + n_c);
        }

        // Terminal group x(T).
        let block_t = if qp.m_terminal() > 0 {
            let w = xi.rows(t * ms, qp.m_terminal());
            let st = scale_rows(qp.ai_term(), w);
            qp.qf_weight() + qp.ai_term().transpose() * st
        } else {
            qp.qf_weight().clone()
        };
        factors.push(block_t.cholesky().ok_or(t)?);
        offsets.push(qp.state_offset(t));
        sizes.push(n_x);

        Ok(Self {
            factors,
            offsets,
            sizes,
        })
    }

    fn solve_vec(&self, v: &DVector<f64>) -> DVector<f64> {
        let mut out = v.clone();
        for (g, chol) in self.factors.iter().enumerate() {
            let seg = out.rows(self.offsets[g], self.sizes[g]).clone_owned();
            out.rows_mut(self.offsets[g], self.sizes[g])
                .copy_from(&chol.solve(&seg));
        }
        out
    }

    /// `Phi_g^{-1} rhs` for one group.
    fn solve_group(&self, g: usize, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        self.factors[g].solve(rhs)
    }
}

/// Schur complement `A_e Phi^{-1} A_e^T` assembled stage-wise into a
/// block-tridiagonal matrix. Row `tau` of `A_e` touches group `tau` (through
/// `[-A, -B]`, just `-B` for the first row) and the state part of group
/// `tau + 1`.
fn schur_complement(qp: &StructuredQp, phi: &PhiFactor) -> BlockTriDiagSym {
    let n_x = qp.n_x();
    let n_c = qp.n_c();
    let t = qp.horizon();

    // G_tau: the row-tau coefficients on group tau.
    let g_block = |tau: usize| -> DMatrix<f64> {
        if tau == 0 {
            -qp.b_transfer().clone()
        } else {
            let mut g = DMatrix::zeros(n_x, n_x + n_c);
            g.view_mut((0, 0), (n_x, n_x)).copy_from(&(-qp.a_xe()));
            g.view_mut((0, n_x), (n_x, n_c))
                .copy_from(&(-qp.b_transfer()));
            g
        }
    };

    // Z_g = Phi_g^{-1} [I; 0] (the x-columns) for interior groups, and
    // Phi_T^{-1} for the terminal group.
    let mut z: Vec<DMatrix<f64>> = Vec::with_capacity(t + 1);
    z.push(DMatrix::zeros(0, 0)); // group 0 has no x part
    for g in 1..t {
        let mut e = DMatrix::zeros(n_x + n_c, n_x);
        e.view_mut((0, 0), (n_x, n_x))
            .copy_from(&DMatrix::identity(n_x, n_x));
        z.push(phi.solve_group(g, &e));
    }
    z.push(phi.solve_group(t, &DMatrix::identity(n_x, n_x)));

    let mut diag = Vec::with_capacity(t);
    let mut sub = Vec::with_capacity(t - 1);
    for tau in 0..t {
        let g = g_block(tau);
        let x = phi.solve_group(tau, &g.transpose());
        let mut d = &g * x;
        // (Phi_{tau+1}^{-1})_xx: top n_x rows of Z.
        d += z[tau + 1].view((0, 0), (n_x, n_x));
        diag.push(d);
        if tau + 1 < t {
            // S(tau+1, tau) = G_{tau+1} Z_{tau+1}.
            sub.push(&g_block(tau + 1) * &z[tau + 1]);
        }
    }
    BlockTriDiagSym::new(diag, sub).expect("schur blocks dimensionally consistent")
}

/// Classical Mehrotra predictor-corrector on the original QP; two
/// factorizations per Newton iteration.
pub fn classical_solve(qp: &StructuredQp, opts: &SolverOptions) -> Result<SolveResult, IpmError> {
    let n = qp.n();
    let m = qp.m_total();
    let p = qp.eq_rows();
    let g = qp.g_vec();
    let b_e = qp.b_e_vec();
    let b_i = qp.b_i_vec();
    let b_e_scale = 1.0 + b_e.amax();

    let mut y = DVector::zeros(n);
    let mut lam_e = DVector::zeros(p);
    let gap0 = &b_i - qp.apply_ai(&y);
    let mut w = DVector::from_fn(m, |k, _| gap0[k].abs().max(1.0));
    let mut lam = DVector::from_element(m, 1.0);

    let mut factorizations = 0usize;
    let mut iter_times = Vec::new();
    let mut residual_history = Vec::new();
    let mut max_eq_violation: f64 = 0.0;
    let mut worst_xi_spread: f64 = 1.0;
    let mut status = SolverStatus::IterLimit;
    let mut final_residual = f64::NAN;
    let mut mu = duality_measure(&lam, &w, n);

    for _iter in 0..opts.i_max {
        let tick = Instant::now();
        mu = duality_measure(&lam, &w, n);

        // KKT residuals at the current iterate.
        let k1 = qp.apply_h(&y) + &g - qp.apply_ae_transpose(&lam_e) - qp.apply_ai_transpose(&lam);
        let k2 = &b_e - qp.apply_ae(&y);
        let gap = &b_i - qp.apply_ai(&y);
        let k3 = &gap + &w;
        max_eq_violation = max_eq_violation.max(k2.amax() / b_e_scale);

        let res_sq = k1.norm_squared() + k2.norm_squared() + k3.norm_squared();
        final_residual = res_sq.sqrt();
        residual_history.push(final_residual);
        let residual_ok = if opts.squared_residual {
            res_sq < opts.eps
        } else {
            final_residual < opts.eps
        };
        if residual_ok && mu < opts.eps_comp {
            status = SolverStatus::Converged;
            iter_times.push(tick.elapsed().as_secs_f64() * 1e6);
            break;
        }

        // Factorization 1: stage-diagonal Phi.
        let xi = DVector::from_fn(m, |k, _| lam[k] / w[k]);
        if m > 0 {
            worst_xi_spread = worst_xi_spread.max(xi.max() / xi.min());
        }
        let phi = match PhiFactor::build(qp, &xi) {
            Ok(f) => f,
            Err(block) => {
                status = SolverStatus::NumericalFailure { block };
                iter_times.push(tick.elapsed().as_secs_f64() * 1e6);
                break;
            }
        };
        factorizations += 1;

        // Factorization 2: block-tridiagonal Schur complement.
        let schur = schur_complement(qp, &phi);
        let schur_factor = match schur.block_cholesky() {
            Ok(f) => f,
            Err(BlockLaError::NotPositiveDefinite { block }) => {
                status = SolverStatus::NumericalFailure { block };
                iter_times.push(tick.elapsed().as_secs_f64() * 1e6);
                break;
            }
            Err(BlockLaError::Dimension { .. }) => unreachable!(),
        };
        factorizations += 1;

        let r2 = -&k2;
        let solve_direction = |f_weights: &DVector<f64>| -> Result<
            (DVector<f64>, DVector<f64>),
            BlockLaError,
        > {
            let mut r1 = -qp.apply_h(&y) - &g + qp.apply_ae_transpose(&lam_e);
            r1 += qp.apply_ai_transpose(f_weights);
            let phi_inv_r1 = phi.solve_vec(&r1);
            let rhs_nu = -&r2 - qp.apply_ae(&phi_inv_r1);
            let dnu = schur_factor.solve(&rhs_nu)?;
            let dy = phi.solve_vec(&(&r1 + qp.apply_ae_transpose(&dnu)));
            Ok((dy, dnu))
        };

        // Predictor.
        let f_pred = predictor_f(&lam, &w, &gap);
        let (dy_aff, _) = match solve_direction(&f_pred) {
            Ok(v) => v,
            Err(BlockLaError::NotPositiveDefinite { block }) => {
                status = SolverStatus::NumericalFailure { block };
                break;
            }
            Err(BlockLaError::Dimension { .. }) => unreachable!(),
        };
        let dw_aff = qp.apply_ai(&dy_aff) - &k3;
        let dlam_aff = DVector::from_fn(m, |k, _| -(lam[k] * (w[k] + dw_aff[k])) / w[k]);

        let (ap_aff, ad_aff) = step_lengths(&w, &dw_aff, &lam, &dlam_aff, 1.0);
        let mu_aff = if m == 0 {
            0.0
        } else {
            let mut dot = 0.0;
            for k in 0..m {
                dot += (lam[k] + ad_aff * dlam_aff[k]) * (w[k] + ap_aff * dw_aff[k]);
            }
            dot / (n + m) as f64
        };
        let sigma = mehrotra_sigma(mu, mu_aff);
        let sigma_mu = sigma * mu;

        // Corrector, reusing both factors.
        let f_corr = corrector_f(&lam, &w, &gap, &dw_aff, &dlam_aff, sigma_mu);
        let (dy, dnu) = match solve_direction(&f_corr) {
            Ok(v) => v,
            Err(BlockLaError::NotPositiveDefinite { block }) => {
                status = SolverStatus::NumericalFailure { block };
                break;
            }
            Err(BlockLaError::Dimension { .. }) => unreachable!(),
        };
        let dw = qp.apply_ai(&dy) - &k3;
        let dlam = DVector::from_fn(m, |k, _| {
            -(lam[k] * w[k] - sigma_mu + dlam_aff[k] * dw_aff[k] + lam[k] * dw[k]) / w[k]
        });

        let (mut ap, mut ad) = step_lengths(&w, &dw, &lam, &dlam, opts.tau);
        if opts.single_alpha {
            let a = ap.min(ad);
            ap = a;
            ad = a;
        }

        y.axpy(ap, &dy, 1.0);
        w.axpy(ap, &dw, 1.0);
        lam.axpy(ad, &dlam, 1.0);
        lam_e.axpy(ad, &dnu, 1.0);

        iter_times.push(tick.elapsed().as_secs_f64() * 1e6);
    }

    let iterations = residual_history
        .len()
        .saturating_sub(matches!(status, SolverStatus::Converged) as usize);
    let objective = objective_value(qp, &y).expect("state length fixed");

    Ok(SolveResult {
        status,
        u_trajectory: qp.original_controls(&y),
        max_virtual_control: qp.max_virtual_control(&y),
        iterations,
        final_residual,
        mu,
        objective,
        iter_times_us: iter_times,
        factorizations,
        feasible_point_solves: 0,
        max_eq_violation,
        worst_xi_spread,
        lambda_e: Some(lam_e),
        residual_history,
        y,
    })
}

/// Classical solver bound to one plant, mirroring
/// [`crate::ipm::NullspaceSolver`].
pub struct ClassicalSolver {
    prob: MpcProblem,
    opts: SolverOptions,
    qp: StructuredQp,
}

impl ClassicalSolver {
    pub fn new(prob: MpcProblem, opts: SolverOptions) -> Result<Self, IpmError> {
        let qp = assemble_qp_original(&prob)?;
        Ok(Self { prob, opts, qp })
    }

    pub fn qp(&self) -> &StructuredQp {
        &self.qp
    }

    pub fn solve(&self) -> Result<SolveResult, IpmError> {
        classical_solve(&self.qp, &self.opts)
    }

    pub fn solve_from(&mut self, x0: &DVector<f64>) -> Result<SolveResult, IpmError> {
        self.prob.x0 = x0.clone();
        self.qp = assemble_qp_original(&self.prob)?;
        self.solve()
    }
}

/// A full primal-dual point for the dense oracle.
#[derive(Debug, Clone)]
pub struct KktPoint {
    pub y: DVector<f64>,
    pub lambda_e: DVector<f64>,
    pub lambda: DVector<f64>,
    pub w: DVector<f64>,
    /// `sigma * mu` for the complementarity row (zero for the affine step).
    pub sigma_mu: f64,
}

/// Newton direction from the dense 4-block KKT system.
#[derive(Debug, Clone)]
pub struct DenseNewton {
    pub dy: DVector<f64>,
    pub dlam_e: DVector<f64>,
    pub dlam: DVector<f64>,
    pub dw: DVector<f64>,
    /// `||grad_K dq + K||_inf` of the computed direction.
    pub residual: f64,
}

const DENSE_KKT_LIMIT: usize = 2000;

/// Solve the dense linearized KKT system
///
/// ```text
/// [ H     -A_e^T  -A_i^T  0      ] [dy    ]    [k1]
/// [ -A_e   0       0      0      ] [dlam_e]  = [k2]  (negated)
/// [ -A_i   0       0      I      ] [dlam  ]    [k3]
/// [ 0      0       W      Lambda ] [dw    ]    [k4]
/// ```
///
/// directly. Desk-scale oracle only; validates the structured substitution
/// path.
pub fn dense_newton_kkt(qp: &StructuredQp, point: &KktPoint) -> Result<DenseNewton, ReferenceError> {
    let n = qp.n();
    let p = qp.eq_rows();
    let m = qp.m_total();
    let dim = n + p + 2 * m;
    if dim > DENSE_KKT_LIMIT {
        return Err(ReferenceError::TooLarge {
            dim,
            limit: DENSE_KKT_LIMIT,
        });
    }
    for (what, got, expected) in [
        ("y", point.y.len(), n),
        ("lambda_e", point.lambda_e.len(), p),
        ("lambda", point.lambda.len(), m),
        ("w", point.w.len(), m),
    ] {
        if got != expected {
            return Err(ReferenceError::BadLength {
                what,
                expected,
                got,
            });
        }
    }

    let h = qp.densify_h();
    let ae = qp.densify_ae();
    let ai = qp.densify_ai();

    let mut grad = DMatrix::zeros(dim, dim);
    grad.view_mut((0, 0), (n, n)).copy_from(&h);
    grad.view_mut((0, n), (n, p)).copy_from(&(-ae.transpose()));
    grad.view_mut((0, n + p), (n, m))
        .copy_from(&(-ai.transpose()));
    grad.view_mut((n, 0), (p, n)).copy_from(&(-&ae));
    grad.view_mut((n + p, 0), (m, n)).copy_from(&(-&ai));
    grad.view_mut((n + p, n + p + m), (m, m))
        .copy_from(&DMatrix::identity(m, m));
    for k in 0..m {
        grad[(n + p + m + k, n + p + k)] = point.w[k];
        grad[(n + p + m + k, n + p + m + k)] = point.lambda[k];
    }

    let k1 = &h * &point.y + qp.g_vec()
        - ae.transpose() * &point.lambda_e
        - ai.transpose() * &point.lambda;
    let k2 = qp.b_e_vec() - &ae * &point.y;
    let k3 = qp.b_i_vec() - &ai * &point.y + &point.w;
    let k4 = DVector::from_fn(m, |k, _| {
        point.lambda[k] * point.w[k] - point.sigma_mu
    });

    let mut rhs = DVector::zeros(dim);
    rhs.rows_mut(0, n).copy_from(&(-&k1));
    rhs.rows_mut(n, p).copy_from(&(-&k2));
    rhs.rows_mut(n + p, m).copy_from(&(-&k3));
    rhs.rows_mut(n + p + m, m).copy_from(&(-&k4));

    let lu = grad.clone().full_piv_lu();
    let dq = lu.solve(&rhs).ok_or(ReferenceError::Singular)?;
    let residual = (&grad * &dq - &rhs).amax();

    Ok(DenseNewton {
        dy: dq.rows(0, n).clone_owned(),
        dlam_e: dq.rows(n, p).clone_owned(),
        dlam: dq.rows(n + p, m).clone_owned(),
        dw: dq.rows(n + p + m, m).clone_owned(),
        residual,
    })
}
