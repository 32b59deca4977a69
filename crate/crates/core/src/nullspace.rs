//! Sparse null-space basis of the dynamics constraints and its projections.
//!
//! With an invertible transfer matrix `B` (after virtual-control
//! augmentation), a basis `N` of the null space of `A_e` is, per stage,
//!
//! ```text
//!     [ I            ]   u(0)
//!     [ B            ]   x(1)
//! N = [ C   I        ]   u(1)     C = -B^{-1} A B
//!     [     B        ]   x(2)
//!     [     C   ...  ]   ...
//! ```
//!
//! so `A_e N = 0` by construction (`-B + B` and `-A B + B B^{-1} A B` cancel
//! block-wise) and every step `dy = N dz` preserves equality feasibility.
//! Crucially the basis couples each stage only to its neighbour, so the
//! projections `N^T H N` and `(A_i N)^T Xi (A_i N)` stay block-tridiagonal.
//! Both projections are computed once at solver setup; only the `Xi`-weighted
//! recombination runs per Newton iteration.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::augment::Augmentation;
use crate::blockla::BlockTriDiagSym;
use crate::problem::StructuredQp;

#[derive(Debug, Error)]
pub enum NullspaceError {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("nonpositive inequality weight at row {index}: {value:e} (w, lambda must stay > 0)")]
    NonPositiveXi { index: usize, value: f64 },
}

/// The sparse null-space basis, stored through its two stage blocks.
#[derive(Debug, Clone)]
pub struct NullBasis {
    n_x: usize,
    horizon: usize,
    b_hat: DMatrix<f64>,
    /// `C = -B^{-1} A B`, the stage coupling block.
    c_mat: DMatrix<f64>,
}

/// Build the basis for a given augmentation and system matrix. `C` is
/// obtained from triangular solves against the QR factors of `B`; no inverse
/// is formed.
pub fn build_basis(
    aug: &Augmentation,
    a_xe: &DMatrix<f64>,
    horizon: usize,
) -> Result<NullBasis, NullspaceError> {
    let n_x = aug.n_x();
    if a_xe.nrows() != n_x || a_xe.ncols() != n_x {
        return Err(NullspaceError::Dimension {
            what: "A_xe",
            expected: n_x,
            got: a_xe.nrows(),
        });
    }
    let ab = a_xe * aug.b_hat();
    let c_mat = -aug
        .solve_bhat(&ab)
        .expect("rhs rows match n_x by construction");
    Ok(NullBasis {
        n_x,
        horizon,
        b_hat: aug.b_hat().clone(),
        c_mat,
    })
}

impl NullBasis {
    pub fn n_x(&self) -> usize {
        self.n_x
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn c_mat(&self) -> &DMatrix<f64> {
        &self.c_mat
    }

    pub fn b_hat(&self) -> &DMatrix<f64> {
        &self.b_hat
    }

    /// Rows of `N` (the primal dimension `2 T n_x`).
    pub fn rows(&self) -> usize {
        2 * self.horizon * self.n_x
    }

    /// Columns of `N` (the reduced dimension `T n_x`).
    pub fn cols(&self) -> usize {
        self.horizon * self.n_x
    }

    fn u_offset(&self, tau: usize) -> usize {
        2 * tau * self.n_x
    }

    fn x_offset(&self, tau: usize) -> usize {
        (2 * tau - 1) * self.n_x
    }

    /// `y = N z`: expand a reduced step to the full variable ordering
    /// `[u(0), x(1), u(1), ..., x(T)]`.
    pub fn apply(&self, z: &DVector<f64>) -> DVector<f64> {
        assert_eq!(z.len(), self.cols());
        let b = self.n_x;
        let mut y = DVector::zeros(self.rows());
        y.rows_mut(self.u_offset(0), b).copy_from(&z.rows(0, b));
        for tau in 1..self.horizon {
            let mut u = y.rows_mut(self.u_offset(tau), b);
            u.gemv(1.0, &self.c_mat, &z.rows((tau - 1) * b, b), 0.0);
            u += z.rows(tau * b, b);
        }
        for tau in 1..=self.horizon {
            y.rows_mut(self.x_offset(tau), b)
                .gemv(1.0, &self.b_hat, &z.rows((tau - 1) * b, b), 0.0);
        }
        y
    }

    /// `N^T v` for a full-length vector `v`.
    pub fn apply_transpose(&self, v: &DVector<f64>) -> DVector<f64> {
        assert_eq!(v.len(), self.rows());
        let b = self.n_x;
        let mut out = DVector::zeros(self.cols());
        for j in 0..self.horizon {
            let mut oj = out.rows_mut(j * b, b);
            oj += v.rows(self.u_offset(j), b);
            oj.gemv_tr(1.0, &self.b_hat, &v.rows(self.x_offset(j + 1), b), 1.0);
            if j + 1 < self.horizon {
                oj.gemv_tr(1.0, &self.c_mat, &v.rows(self.u_offset(j + 1), b), 1.0);
            }
        }
        out
    }

    /// Densified `N` (test oracle use).
    pub fn densify(&self) -> DMatrix<f64> {
        let b = self.n_x;
        let mut n = DMatrix::zeros(self.rows(), self.cols());
        let eye = DMatrix::identity(b, b);
        n.view_mut((self.u_offset(0), 0), (b, b)).copy_from(&eye);
        for tau in 1..self.horizon {
            n.view_mut((self.u_offset(tau), (tau - 1) * b), (b, b))
                .copy_from(&self.c_mat);
            n.view_mut((self.u_offset(tau), tau * b), (b, b))
                .copy_from(&eye);
        }
        for tau in 1..=self.horizon {
            n.view_mut((self.x_offset(tau), (tau - 1) * b), (b, b))
                .copy_from(&self.b_hat);
        }
        n
    }
}

/// The two nonzero blocks of each inequality row of `A_i N`, shared across
/// stages because the problem data is time-invariant.
#[derive(Debug, Clone)]
pub struct AiNBlocks {
    /// Current-stage block: the (augmented) control coefficients.
    pub b_hat_i: DMatrix<f64>,
    /// Previous-stage block `M3 = A_xi B + B_i C`.
    pub m3: DMatrix<f64>,
    /// Terminal row block `A_xi B`.
    pub term: DMatrix<f64>,
    m_stage: usize,
    m_term: usize,
    horizon: usize,
    n_x: usize,
}

impl AiNBlocks {
    pub fn m_stage(&self) -> usize {
        self.m_stage
    }

    pub fn m_term(&self) -> usize {
        self.m_term
    }

    /// Densified `A_i N` (test oracle use).
    pub fn densify(&self) -> DMatrix<f64> {
        let b = self.n_x;
        let rows = self.horizon * self.m_stage + self.m_term;
        let mut out = DMatrix::zeros(rows, self.horizon * b);
        for tau in 0..self.horizon {
            let r = tau * self.m_stage;
            if tau > 0 {
                out.view_mut((r, (tau - 1) * b), (self.m_stage, b))
                    .copy_from(&self.m3);
            }
            out.view_mut((r, tau * b), (self.m_stage, b))
                .copy_from(&self.b_hat_i);
        }
        if self.m_term > 0 {
            out.view_mut(
                (self.horizon * self.m_stage, (self.horizon - 1) * b),
                (self.m_term, b),
            )
            .copy_from(&self.term);
        }
        out
    }
}

/// Offline projections: `N^T H N` as a block-tridiagonal matrix, the `A_i N`
/// blocks, and the cached stage matrices they are built from.
#[derive(Debug, Clone)]
pub struct Projections {
    pub nhn: BlockTriDiagSym,
    pub ain: AiNBlocks,
    /// `M1 = Q B + S C`.
    pub m1: DMatrix<f64>,
    /// `M2 = S^T B + U C` (the off-diagonal block of `N^T H N`).
    pub m2: DMatrix<f64>,
}

/// Project the cost blocks: `N^T H N` assembled stage-wise in O(T) block
/// products.
///
/// Interior diagonal blocks are `U + B^T M1 + C^T M2`, the subdiagonal is
/// `M2`, and the terminal diagonal is `U + B^T Q_f B`.
pub fn project_hessian(
    basis: &NullBasis,
    qp: &StructuredQp,
) -> Result<BlockTriDiagSym, NullspaceError> {
    let b = basis.n_x;
    if qp.n_c() != b || qp.n_x() != b {
        return Err(NullspaceError::Dimension {
            what: "qp control block (must be augmented to n_x)",
            expected: b,
            got: qp.n_c(),
        });
    }
    if qp.horizon() != basis.horizon {
        return Err(NullspaceError::Dimension {
            what: "horizon",
            expected: basis.horizon,
            got: qp.horizon(),
        });
    }
    let t = basis.horizon;
    let b_hat = &basis.b_hat;
    let c = &basis.c_mat;

    let m1 = qp.q_weight() * b_hat + qp.s_cross() * c;
    let m2 = qp.s_cross().transpose() * b_hat + qp.u_weight() * c;

    let interior = qp.u_weight() + b_hat.transpose() * &m1 + c.transpose() * &m2;
    let terminal = qp.u_weight() + b_hat.transpose() * qp.qf_weight() * b_hat;

    let mut diag = Vec::with_capacity(t);
    for _ in 0..t - 1 {
        diag.push(interior.clone());
    }
    diag.push(terminal);
    let sub = vec![m2.clone(); t - 1];
    BlockTriDiagSym::new(diag, sub).map_err(|_| NullspaceError::Dimension {
        what: "projected Hessian blocks",
        expected: b,
        got: 0,
    })
}

/// Project the inequality rows: per stage row the previous-column block `M3`
/// and the current-column block `B_i`; the terminal row reduces to
/// `A_xi B` on the last column.
pub fn project_inequalities(
    basis: &NullBasis,
    qp: &StructuredQp,
) -> Result<AiNBlocks, NullspaceError> {
    let b = basis.n_x;
    if qp.n_c() != b {
        return Err(NullspaceError::Dimension {
            what: "qp control block (must be augmented to n_x)",
            expected: b,
            got: qp.n_c(),
        });
    }
    let m3 = qp.ai_x() * &basis.b_hat + qp.ai_u() * &basis.c_mat;
    let term = qp.ai_term() * &basis.b_hat;
    Ok(AiNBlocks {
        b_hat_i: qp.ai_u().clone(),
        m3,
        term,
        m_stage: qp.m_stage(),
        m_term: qp.m_terminal(),
        horizon: basis.horizon,
        n_x: b,
    })
}

/// Build both projections once at solver setup.
pub fn build_projections(
    basis: &NullBasis,
    qp: &StructuredQp,
) -> Result<Projections, NullspaceError> {
    let nhn = project_hessian(basis, qp)?;
    let ain = project_inequalities(basis, qp)?;
    let m1 = qp.q_weight() * &basis.b_hat + qp.s_cross() * &basis.c_mat;
    let m2 = qp.s_cross().transpose() * &basis.b_hat + qp.u_weight() * &basis.c_mat;
    Ok(Projections { nhn, ain, m1, m2 })
}

/// `N^T Phi N = N^T H N + (A_i N)^T diag(xi) (A_i N)` accumulated into the
/// caller-owned block-tridiagonal buffer. `xi` follows the `b_i` row
/// ordering; every entry must be strictly positive.
pub fn compose_projected_phi(
    proj: &Projections,
    xi: &DVector<f64>,
    buf: &mut BlockTriDiagSym,
) -> Result<(), NullspaceError> {
    for (i, &v) in xi.iter().enumerate() {
        if v <= 0.0 || !v.is_finite() {
            return Err(NullspaceError::NonPositiveXi { index: i, value: v });
        }
    }
    compose_projected_phi_unchecked(proj, xi, buf)
}

/// As [`compose_projected_phi`] without the positivity check; the `xi -> 0`
/// limit is a legitimate probe in oracle tests.
pub fn compose_projected_phi_unchecked(
    proj: &Projections,
    xi: &DVector<f64>,
    buf: &mut BlockTriDiagSym,
) -> Result<(), NullspaceError> {
    let t = proj.ain.horizon;
    let ms = proj.ain.m_stage;
    let mt = proj.ain.m_term;
    if xi.len() != t * ms + mt {
        return Err(NullspaceError::Dimension {
            what: "xi",
            expected: t * ms + mt,
            got: xi.len(),
        });
    }
    if buf.nblocks() != t || buf.block_size() != proj.ain.n_x {
        return Err(NullspaceError::Dimension {
            what: "output buffer",
            expected: t,
            got: buf.nblocks(),
        });
    }

    buf.copy_from(&proj.nhn);

    let scale_rows = |m: &DMatrix<f64>, w: nalgebra::DVectorView<f64>| -> DMatrix<f64> {
        let mut out = m.clone();
        for (i, mut row) in out.row_iter_mut().enumerate() {
            row *= w[i];
        }
        out
    };

    for tau in 0..t {
        let w = xi.rows(tau * ms, ms);
        let scaled_b = scale_rows(&proj.ain.b_hat_i, w);
        buf.add_to_diag(tau, &(proj.ain.b_hat_i.transpose() * &scaled_b));
        if tau > 0 {
            let scaled_m3 = scale_rows(&proj.ain.m3, w);
            buf.add_to_diag(tau - 1, &(proj.ain.m3.transpose() * &scaled_m3));
            // Block (tau, tau-1) of the projected product: B_i^T Xi M3.
            buf.add_to_sub(tau - 1, &(scaled_b.transpose() * &proj.ain.m3));
        }
    }
    if mt > 0 {
        let w = xi.rows(t * ms, mt);
        let scaled = scale_rows(&proj.ain.term, w);
        buf.add_to_diag(t - 1, &(proj.ain.term.transpose() * &scaled));
    }
    buf.symmetrize();
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{assemble_qp, MpcProblem};
    use nalgebra::{DMatrix, DVector};

    fn identity_fixture(n_x: usize, t: usize) -> (MpcProblem, Augmentation, StructuredQp, NullBasis)
    {
        let prob = MpcProblem {
            a_xe: DMatrix::identity(n_x, n_x),
            b_ue: DMatrix::identity(n_x, n_x),
            q_cost: DMatrix::identity(n_x, n_x),
            u_cost: DMatrix::identity(n_x, n_x),
            s_cost: DMatrix::zeros(n_x, n_x),
            q_lin: DVector::zeros(n_x),
            r_lin: DVector::zeros(n_x),
            qf_cost: DMatrix::identity(n_x, n_x),
            qf_lin: DVector::zeros(n_x),
            a_xi: DMatrix::zeros(0, n_x),
            b_ui: DMatrix::zeros(0, n_x),
            b_xui: DVector::zeros(0),
            b_xui_f: DVector::zeros(0),
            c: DVector::zeros(n_x),
            horizon: t,
            x0: DVector::zeros(n_x),
        };
        let aug = Augmentation::build(&prob.b_ue).unwrap();
        let qp = assemble_qp(&prob, &aug).unwrap();
        let basis = build_basis(&aug, &prob.a_xe, t).unwrap();
        (prob, aug, qp, basis)
    }

    #[test]
    fn identity_plant_basis_annihilates_ae() {
        let (_, _, qp, basis) = identity_fixture(3, 4);
        assert!((basis.c_mat() + DMatrix::identity(3, 3)).amax() < 1e-14);
        let prod = qp.densify_ae() * basis.densify();
        assert!(prod.amax() < 1e-14);
    }

    #[test]
    fn apply_matches_dense_basis() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(23);
        let b_ue = DMatrix::from_fn(4, 2, |_, _| rng.random_range(-1.0..1.0));
        let a_xe = DMatrix::from_fn(4, 4, |_, _| rng.random_range(-1.0..1.0));
        let aug = Augmentation::build(&b_ue).unwrap();
        let basis = build_basis(&aug, &a_xe, 5).unwrap();
        let n_dense = basis.densify();

        let z = DVector::from_fn(basis.cols(), |_, _| rng.random_range(-1.0..1.0));
        assert!((basis.apply(&z) - &n_dense * &z).amax() < 1e-12);

        let v = DVector::from_fn(basis.rows(), |_, _| rng.random_range(-1.0..1.0));
        assert!((basis.apply_transpose(&v) - n_dense.transpose() * &v).amax() < 1e-12);
    }

    #[test]
    fn random_plant_basis_in_nullspace() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(31);
        let n_x = 3;
        let b_ue = DMatrix::from_fn(n_x, 1, |_, _| rng.random_range(-1.0..1.0));
        let a_xe = DMatrix::from_fn(n_x, n_x, |_, _| rng.random_range(-1.0..1.0));
        let prob = MpcProblem {
            a_xe: a_xe.clone(),
            b_ue: b_ue.clone(),
            q_cost: DMatrix::identity(n_x, n_x),
            u_cost: DMatrix::identity(1, 1),
            s_cost: DMatrix::zeros(n_x, 1),
            q_lin: DVector::zeros(n_x),
            r_lin: DVector::zeros(1),
            qf_cost: DMatrix::identity(n_x, n_x),
            qf_lin: DVector::zeros(n_x),
            a_xi: DMatrix::zeros(0, n_x),
            b_ui: DMatrix::zeros(0, 1),
            b_xui: DVector::zeros(0),
            b_xui_f: DVector::zeros(0),
            c: DVector::zeros(n_x),
            horizon: 4,
            x0: DVector::zeros(n_x),
        };
        let aug = Augmentation::build(&b_ue).unwrap();
        let qp = assemble_qp(&prob, &aug).unwrap();
        let basis = build_basis(&aug, &a_xe, 4).unwrap();
        let ae = qp.densify_ae();
        let n = basis.densify();
        let scale = ae.amax() * n.amax();
        assert!((&ae * &n).amax() <= 1e-12 * scale.max(1.0));

        // A_e (N z) = 0 for arbitrary z.
        let z = DVector::from_fn(basis.cols(), |i, _| (i as f64 * 1.3).sin());
        let ae_nz = qp.apply_ae(&basis.apply(&z));
        assert!(ae_nz.amax() <= 1e-12 * scale.max(1.0));
    }

    #[test]
    fn identity_fixture_projected_hessian_closed_form() {
        // Q = U = I, S = 0, A = B = I: C = -I, interior diag 3I, sub -I,
        // terminal diag 2I.
        let (_, _, qp, basis) = identity_fixture(2, 3);
        let nhn = project_hessian(&basis, &qp).unwrap();
        assert!((nhn.diag_block(0) - DMatrix::identity(2, 2) * 3.0).amax() < 1e-14);
        assert!((nhn.diag_block(1) - DMatrix::identity(2, 2) * 3.0).amax() < 1e-14);
        assert!((nhn.diag_block(2) - DMatrix::identity(2, 2) * 2.0).amax() < 1e-14);
        assert!((nhn.sub_block(0) + DMatrix::identity(2, 2)).amax() < 1e-14);

        // Against the dense product.
        let dense = basis.densify().transpose() * qp.densify_h() * basis.densify();
        assert!((nhn.densify() - dense).amax() < 1e-12);
    }

    #[test]
    fn near_zero_state_cost_projection() {
        // Q ~ 0, S = 0, Q_f = 0 and U = I: only the U terms survive the
        // projection. With A = B = I (so C = -I) the interior diagonal is
        // I + C^T C = 2I and the subdiagonal is U C = -I; terminal is I.
        let prob = MpcProblem {
            q_cost: DMatrix::identity(2, 2) * 1e-30,
            qf_cost: DMatrix::zeros(2, 2),
            ..identity_fixture(2, 3).0
        };
        let aug = Augmentation::build(&prob.b_ue).unwrap();
        let qp = assemble_qp(&prob, &aug).unwrap();
        let basis = build_basis(&aug, &prob.a_xe, 3).unwrap();
        let nhn = project_hessian(&basis, &qp).unwrap();
        assert!((nhn.diag_block(0) - DMatrix::identity(2, 2) * 2.0).amax() < 1e-14);
        assert!((nhn.diag_block(2) - DMatrix::identity(2, 2)).amax() < 1e-14);
        assert!((nhn.sub_block(0) + DMatrix::identity(2, 2)).amax() < 1e-14);
        let dense = basis.densify().transpose() * qp.densify_h() * basis.densify();
        assert!((nhn.densify() - dense).amax() < 1e-12);
    }

    #[test]
    fn inequality_projection_pure_input_bounds() {
        // A_xi = 0, B_ui = I: M3 = C, stage blocks are (C, I).
        let n_x = 2;
        let prob = MpcProblem {
            a_xi: DMatrix::zeros(n_x, n_x),
            b_ui: DMatrix::identity(n_x, n_x),
            b_xui: DVector::from_element(n_x, -0.5),
            b_xui_f: DVector::from_element(n_x, -0.5),
            ..identity_fixture(n_x, 3).0
        };
        let aug = Augmentation::build(&prob.b_ue).unwrap();
        let qp = assemble_qp(&prob, &aug).unwrap();
        let basis = build_basis(&aug, &prob.a_xe, 3).unwrap();
        let ain = project_inequalities(&basis, &qp).unwrap();
        assert!((&ain.m3 - basis.c_mat()).amax() < 1e-14);
        assert!((&ain.b_hat_i - DMatrix::identity(n_x, n_x)).amax() < 1e-14);

        let dense = qp.densify_ai() * basis.densify();
        assert!((ain.densify() - dense).amax() < 1e-12);
    }

    #[test]
    fn compose_with_zero_xi_equals_nhn() {
        let n_x = 2;
        let prob = MpcProblem {
            a_xi: DMatrix::identity(n_x, n_x),
            b_ui: DMatrix::zeros(n_x, n_x),
            b_xui: DVector::from_element(n_x, -4.0),
            b_xui_f: DVector::from_element(n_x, -4.0),
            ..identity_fixture(n_x, 3).0
        };
        let aug = Augmentation::build(&prob.b_ue).unwrap();
        let qp = assemble_qp(&prob, &aug).unwrap();
        let basis = build_basis(&aug, &prob.a_xe, 3).unwrap();
        let proj = build_projections(&basis, &qp).unwrap();

        let xi = DVector::zeros(qp.m_total());
        let mut buf = BlockTriDiagSym::zeros(n_x, 3);
        compose_projected_phi_unchecked(&proj, &xi, &mut buf).unwrap();
        assert!((buf.densify() - proj.nhn.densify()).amax() < 1e-14);

        // The checked variant rejects nonpositive entries.
        assert!(matches!(
            compose_projected_phi(&proj, &xi, &mut buf),
            Err(NullspaceError::NonPositiveXi { .. })
        ));
    }

    #[test]
    fn compose_with_unit_xi_matches_dense() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(41);
        let n_x = 3;
        let n_u = 1;
        let b_ue = DMatrix::from_fn(n_x, n_u, |_, _| rng.random_range(-1.0..1.0));
        let a_xe = DMatrix::from_fn(n_x, n_x, |_, _| rng.random_range(-0.6..0.6));
        let m_i = 2 * n_x + 2 * n_u;
        let mut a_xi = DMatrix::zeros(m_i, n_x);
        a_xi.view_mut((0, 0), (n_x, n_x))
            .copy_from(&DMatrix::identity(n_x, n_x));
        a_xi.view_mut((n_x, 0), (n_x, n_x))
            .copy_from(&(-DMatrix::identity(n_x, n_x)));
        let mut b_ui = DMatrix::zeros(m_i, n_u);
        b_ui[(2 * n_x, 0)] = 1.0;
        b_ui[(2 * n_x + 1, 0)] = -1.0;
        let prob = MpcProblem {
            a_xe: a_xe.clone(),
            b_ue: b_ue.clone(),
            q_cost: DMatrix::identity(n_x, n_x),
            u_cost: DMatrix::identity(n_u, n_u),
            s_cost: DMatrix::zeros(n_x, n_u),
            q_lin: DVector::zeros(n_x),
            r_lin: DVector::zeros(n_u),
            qf_cost: DMatrix::identity(n_x, n_x),
            qf_lin: DVector::zeros(n_x),
            a_xi,
            b_ui,
            b_xui: DVector::from_element(m_i, -4.0),
            b_xui_f: DVector::from_element(m_i, -4.0),
            c: DVector::zeros(n_x),
            horizon: 4,
            x0: DVector::zeros(n_x),
        };
        let aug = Augmentation::build(&b_ue).unwrap();
        let qp = assemble_qp(&prob, &aug).unwrap();
        let basis = build_basis(&aug, &a_xe, 4).unwrap();
        let proj = build_projections(&basis, &qp).unwrap();

        let xi = DVector::from_element(qp.m_total(), 1.0);
        let mut buf = BlockTriDiagSym::zeros(n_x, 4);
        compose_projected_phi(&proj, &xi, &mut buf).unwrap();

        let n_dense = basis.densify();
        let ai = qp.densify_ai();
        let dense =
            n_dense.transpose() * (qp.densify_h() + ai.transpose() * &ai) * &n_dense;
        let scale = dense.amax();
        assert!((buf.densify() - dense).amax() <= 1e-10 * scale);

        // SPD whenever xi > 0: the factorization must succeed.
        let xi = DVector::from_fn(qp.m_total(), |i, _| 0.1 + (i % 5) as f64);
        compose_projected_phi(&proj, &xi, &mut buf).unwrap();
        assert!(buf.block_cholesky().is_ok());
    }
}
