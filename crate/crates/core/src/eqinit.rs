//! Structured QR of the dynamics matrix `A_e`, the initial feasible point,
//! and optional equality-dual recovery.
//!
//! `A_e P = [banded | D]` for a permutation picking a square block-banded
//! column subset; the free `D` columns of the feasible point are set to zero.
//! Which subset is picked depends on diagonal-ratio condition estimates of
//! `B_hat` and `A_xe` against a threshold `xi` (default 10):
//!
//! - `P1` (`kappa(B_hat) < xi`): pivot on the `-B_hat` blocks. The QR factors
//!   of `B_hat` are reused block-diagonally; nothing new is factorized.
//! - `P2` (`kappa(B_hat) >= xi`, `kappa(A_xe) < xi`): pivot on
//!   `(u(0), x(1), ..., x(T-1))`, an upper block-bidiagonal selection whose
//!   QR is composed from the QR factors of `B_hat` and `A_xe`.
//! - `P3` (otherwise): pivot on the states `(x(1), ..., x(T))` and run a
//!   banded Householder QR over the `(I, -A_xe)` ladder from scratch.
//!
//! `V = Q^T D` is never formed; it is not needed for any of the solves. The
//! same factorization answers `A_e^T lam = rhs` for consistent right-hand
//! sides, which is how the equality duals are recovered when requested.

use std::sync::atomic::{AtomicUsize, Ordering};

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::augment::Augmentation;

#[derive(Debug, Error)]
pub enum EqInitError {
    #[error("rhs length {got}, expected {expected}")]
    BadLength { expected: usize, got: usize },
    #[error("triangular solve failed in {0}")]
    Solve(&'static str),
}

/// Which permutation/factorization case was selected.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QrCase {
    P1,
    P2,
    P3,
}

/// Banded Householder QR of the `(I, -A_xe)` ladder used by case `P3`.
#[derive(Debug)]
struct LadderQr {
    /// Full orthogonal factor of each 2b x b panel (the last panel is b x b).
    q_panels: Vec<DMatrix<f64>>,
    /// Upper-triangular diagonal blocks of R.
    r_diag: Vec<DMatrix<f64>>,
    /// Superdiagonal blocks of R.
    r_super: Vec<DMatrix<f64>>,
}

/// Structured QR factorization of `A_e` for one plant and horizon.
#[derive(Debug)]
pub struct StructuredQrAe {
    case: QrCase,
    n_x: usize,
    n_c: usize,
    horizon: usize,
    kappa_b: f64,
    kappa_a: f64,
    xi_threshold: f64,
    q_bhat: DMatrix<f64>,
    r_bhat: DMatrix<f64>,
    q_axe: DMatrix<f64>,
    r_axe: DMatrix<f64>,
    ladder: Option<LadderQr>,
    primal_solves: AtomicUsize,
}

/// Diagonal-ratio condition estimate from an upper-triangular factor.
fn diag_ratio(r: &DMatrix<f64>) -> f64 {
    let mut lo = f64::INFINITY;
    let mut hi: f64 = 0.0;
    for i in 0..r.nrows().min(r.ncols()) {
        let d = r[(i, i)].abs();
        lo = lo.min(d);
        hi = hi.max(d);
    }
    hi / lo
}

fn full_qr(m: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let rows = m.nrows();
    let qr = m.clone().qr();
    let r = qr.r();
    let mut qt = DMatrix::identity(rows, rows);
    qr.q_tr_mul(&mut qt);
    (qt.transpose(), r)
}

/// Factorize `A_e`, choosing the permutation case from the condition
/// estimates. `P3` always succeeds for full-rank inputs.
pub fn factorize_ae(
    aug: &Augmentation,
    a_xe: &DMatrix<f64>,
    horizon: usize,
    xi_threshold: f64,
) -> StructuredQrAe {
    let n_x = aug.n_x();
    let (q_axe, r_axe) = full_qr(a_xe);
    let kappa_b = aug.kappa();
    let kappa_a = diag_ratio(&r_axe);

    let case = if kappa_b < xi_threshold {
        QrCase::P1
    } else if kappa_a < xi_threshold {
        QrCase::P2
    } else {
        QrCase::P3
    };

    let ladder = if case == QrCase::P3 {
        Some(ladder_qr(a_xe, horizon))
    } else {
        None
    };

    StructuredQrAe {
        case,
        n_x,
        n_c: n_x,
        horizon,
        kappa_b,
        kappa_a,
        xi_threshold,
        q_bhat: aug.q_hat().clone(),
        r_bhat: aug.r_hat().clone(),
        q_axe,
        r_axe,
        ladder,
        primal_solves: AtomicUsize::new(0),
    }
}

/// Householder QR of the lower block-bidiagonal ladder with `I` on the
/// diagonal and `-A_xe` below. Each panel couples two block rows; applying
/// the panel's `Q^T` to the trailing `[0; I]` column yields the superdiagonal
/// block of R and the next panel's diagonal seed.
fn ladder_qr(a_xe: &DMatrix<f64>, horizon: usize) -> LadderQr {
    let b = a_xe.nrows();
    let mut q_panels = Vec::with_capacity(horizon);
    let mut r_diag = Vec::with_capacity(horizon);
    let mut r_super = Vec::with_capacity(horizon.saturating_sub(1));

    let mut d = DMatrix::identity(b, b);
    for j in 0..horizon {
        if j + 1 < horizon {
            let mut panel = DMatrix::zeros(2 * b, b);
            panel.view_mut((0, 0), (b, b)).copy_from(&d);
            panel.view_mut((b, 0), (b, b)).copy_from(&(-a_xe));
            let (q, r) = full_qr(&panel);
            r_diag.push(r.view((0, 0), (b, b)).clone_owned());
            // Trailing column block is [0; I] in this panel's rows.
            let trailing = q.transpose().view((0, b), (2 * b, b)).clone_owned();
            r_super.push(trailing.view((0, 0), (b, b)).clone_owned());
            d = trailing.view((b, 0), (b, b)).clone_owned();
            q_panels.push(q);
        } else {
            let (q, r) = full_qr(&d);
            r_diag.push(r);
            q_panels.push(q);
        }
    }
    LadderQr {
        q_panels,
        r_diag,
        r_super,
    }
}

impl StructuredQrAe {
    pub fn case(&self) -> QrCase {
        self.case
    }

    pub fn kappa_b(&self) -> f64 {
        self.kappa_b
    }

    pub fn kappa_a(&self) -> f64 {
        self.kappa_a
    }

    pub fn xi_threshold(&self) -> f64 {
        self.xi_threshold
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    /// How many feasible-point solves ran against this factorization.
    pub fn primal_solve_count(&self) -> usize {
        self.primal_solves.load(Ordering::Relaxed)
    }

    /// Primal length `T (n_c + n_x)`.
    fn primal_len(&self) -> usize {
        self.horizon * (self.n_c + self.n_x)
    }

    fn u_offset(&self, tau: usize) -> usize {
        tau * (self.n_c + self.n_x)
    }

    fn x_offset(&self, tau: usize) -> usize {
        (tau - 1) * (self.n_c + self.n_x) + self.n_c
    }

    /// `-B_hat^{-1} v` via the stored QR factors.
    fn solve_neg_bhat(&self, v: &DVector<f64>) -> Result<DVector<f64>, EqInitError> {
        let qt_v = self.q_bhat.transpose() * v;
        let s = self
            .r_bhat
            .solve_upper_triangular(&qt_v)
            .ok_or(EqInitError::Solve("R_bhat"))?;
        Ok(-s)
    }

    /// `-A_xe^{-1} v` via the stored QR factors.
    fn solve_neg_axe(&self, v: &DVector<f64>) -> Result<DVector<f64>, EqInitError> {
        let qt_v = self.q_axe.transpose() * v;
        let s = self
            .r_axe
            .solve_upper_triangular(&qt_v)
            .ok_or(EqInitError::Solve("R_axe"))?;
        Ok(-s)
    }

    /// Solve `A_e y = b_e` with the free (non-pivot) variables set to zero.
    ///
    /// Runs once per QP solve, before the Newton loop.
    #[allow(clippy::needless_range_loop)]
    pub fn solve_feasible_point(&self, b_e: &DVector<f64>) -> Result<DVector<f64>, EqInitError> {
        let b = self.n_x;
        let t = self.horizon;
        if b_e.len() != t * b {
            return Err(EqInitError::BadLength {
                expected: t * b,
                got: b_e.len(),
            });
        }
        self.primal_solves.fetch_add(1, Ordering::Relaxed);
        let mut y = DVector::zeros(self.primal_len());

        match self.case {
            QrCase::P1 => {
                // Block diagonal in the control columns: -B_hat u(tau) = b(tau).
                for tau in 0..t {
                    let u = self.solve_neg_bhat(&b_e.rows(tau * b, b).clone_owned())?;
                    y.rows_mut(self.u_offset(tau), b).copy_from(&u);
                }
            }
            QrCase::P2 => {
                // Upper block bidiagonal over (u(0), x(1), ..., x(T-1)):
                // back-substitute from the last block row.
                let mut xi = vec![DVector::zeros(b); t];
                for tau in (0..t).rev() {
                    let mut rhs = b_e.rows(tau * b, b).clone_owned();
                    if tau + 1 < t {
                        rhs -= &xi[tau + 1];
                    }
                    xi[tau] = if tau == 0 {
                        self.solve_neg_bhat(&rhs)?
                    } else {
                        self.solve_neg_axe(&rhs)?
                    };
                }
                y.rows_mut(self.u_offset(0), b).copy_from(&xi[0]);
                for tau in 1..t {
                    y.rows_mut(self.x_offset(tau), b).copy_from(&xi[tau]);
                }
            }
            QrCase::P3 => {
                let ladder = self.ladder.as_ref().expect("P3 stores the ladder QR");
                // Apply the panel Q^T factors to the rhs in order.
                let mut rhs = b_e.clone();
                for j in 0..t {
                    if j + 1 < t {
                        let mut stacked = DVector::zeros(2 * b);
                        stacked.rows_mut(0, b).copy_from(&rhs.rows(j * b, b));
                        stacked
                            .rows_mut(b, b)
                            .copy_from(&rhs.rows((j + 1) * b, b));
                        let applied = ladder.q_panels[j].transpose() * stacked;
                        rhs.rows_mut(j * b, b).copy_from(&applied.rows(0, b));
                        rhs.rows_mut((j + 1) * b, b)
                            .copy_from(&applied.rows(b, b));
                    } else {
                        let applied =
                            ladder.q_panels[j].transpose() * rhs.rows(j * b, b).clone_owned();
                        rhs.rows_mut(j * b, b).copy_from(&applied);
                    }
                }
                // Back-substitute the upper block-bidiagonal R.
                let mut xi = vec![DVector::zeros(b); t];
                for j in (0..t).rev() {
                    let mut v = rhs.rows(j * b, b).clone_owned();
                    if j + 1 < t {
                        v.gemv(-1.0, &ladder.r_super[j], &xi[j + 1], 1.0);
                    }
                    xi[j] = ladder.r_diag[j]
                        .solve_upper_triangular(&v)
                        .ok_or(EqInitError::Solve("ladder R"))?;
                }
                for j in 0..t {
                    y.rows_mut(self.x_offset(j + 1), b).copy_from(&xi[j]);
                }
            }
        }
        Ok(y)
    }

    /// Solve `A_e^T lam = rhs` for a consistent right-hand side, reusing the
    /// same factors. Only the pivot-column components of `rhs` are needed;
    /// the remaining rows hold automatically when `rhs` is in the range of
    /// `A_e^T`.
    pub fn solve_dual(&self, rhs: &DVector<f64>) -> Result<DVector<f64>, EqInitError> {
        let b = self.n_x;
        let t = self.horizon;
        if rhs.len() != self.primal_len() {
            return Err(EqInitError::BadLength {
                expected: self.primal_len(),
                got: rhs.len(),
            });
        }
        let mut lam = DVector::zeros(t * b);

        match self.case {
            QrCase::P1 => {
                // (-B_hat)^T lam(tau) = rhs_u(tau), block by block.
                for tau in 0..t {
                    let s = rhs.rows(self.u_offset(tau), b).clone_owned();
                    let l = self.solve_neg_bhat_transpose(&s)?;
                    lam.rows_mut(tau * b, b).copy_from(&l);
                }
            }
            QrCase::P2 => {
                // Lower block bidiagonal M^T: forward substitution.
                for tau in 0..t {
                    let mut s = if tau == 0 {
                        rhs.rows(self.u_offset(0), b).clone_owned()
                    } else {
                        rhs.rows(self.x_offset(tau), b).clone_owned()
                    };
                    if tau > 0 {
                        let prev = lam.rows((tau - 1) * b, b).clone_owned();
                        s -= prev;
                    }
                    let l = if tau == 0 {
                        self.solve_neg_bhat_transpose(&s)?
                    } else {
                        self.solve_neg_axe_transpose(&s)?
                    };
                    lam.rows_mut(tau * b, b).copy_from(&l);
                }
            }
            QrCase::P3 => {
                let ladder = self.ladder.as_ref().expect("P3 stores the ladder QR");
                // R^T eta = s (forward over the block bidiagonal), lam = Q eta.
                let mut eta = DVector::zeros(t * b);
                for j in 0..t {
                    let mut s = rhs.rows(self.x_offset(j + 1), b).clone_owned();
                    if j > 0 {
                        let prev = eta.rows((j - 1) * b, b).clone_owned();
                        s.gemv_tr(-1.0, &ladder.r_super[j - 1], &prev, 1.0);
                    }
                    let e = ladder.r_diag[j]
                        .tr_solve_upper_triangular(&s)
                        .ok_or(EqInitError::Solve("ladder R^T"))?;
                    eta.rows_mut(j * b, b).copy_from(&e);
                }
                // lam = Q_0 Q_1 ... Q_{T-1} eta: apply panels in reverse order.
                lam.copy_from(&eta);
                for j in (0..t).rev() {
                    if j + 1 < t {
                        let mut stacked = DVector::zeros(2 * b);
                        stacked.rows_mut(0, b).copy_from(&lam.rows(j * b, b));
                        stacked
                            .rows_mut(b, b)
                            .copy_from(&lam.rows((j + 1) * b, b));
                        let applied = &ladder.q_panels[j] * stacked;
                        lam.rows_mut(j * b, b).copy_from(&applied.rows(0, b));
                        lam.rows_mut((j + 1) * b, b)
                            .copy_from(&applied.rows(b, b));
                    } else {
                        let applied = &ladder.q_panels[j] * lam.rows(j * b, b).clone_owned();
                        lam.rows_mut(j * b, b).copy_from(&applied);
                    }
                }
            }
        }
        Ok(lam)
    }

    fn solve_neg_bhat_transpose(&self, v: &DVector<f64>) -> Result<DVector<f64>, EqInitError> {
        // (-B_hat)^T x = v  =>  x = -Q_bhat R_bhat^{-T} v.
        let s = self
            .r_bhat
            .tr_solve_upper_triangular(v)
            .ok_or(EqInitError::Solve("R_bhat^T"))?;
        Ok(-(&self.q_bhat * s))
    }

    fn solve_neg_axe_transpose(&self, v: &DVector<f64>) -> Result<DVector<f64>, EqInitError> {
        let s = self
            .r_axe
            .tr_solve_upper_triangular(v)
            .ok_or(EqInitError::Solve("R_axe^T"))?;
        Ok(-(&self.q_axe * s))
    }
}

/// Recover the equality-dual step from `A_e^T dlam_e = Phi dy - r1`. Off by
/// default in the solver; the primal never depends on it.
pub fn recover_equality_duals(
    fac: &StructuredQrAe,
    rhs: &DVector<f64>,
) -> Result<DVector<f64>, EqInitError> {
    fac.solve_dual(rhs)
}
