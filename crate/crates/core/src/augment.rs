//! Virtual controls: padding the transfer matrix to a square invertible one.
//!
//! For an underactuated plant (`n_u < n_x`) the transfer matrix `B` is tall
//! and has no inverse. We append `n_x - n_u` virtual control columns taken
//! from the orthogonal complement of `range(B)`, scaled by the smallest
//! `|R|`-diagonal entry of the QR factors of `B` so the padded matrix stays
//! well conditioned:
//!
//! ```text
//! B_hat = [ B   Q2 * r_min ],   B = [Q1 Q2] [R; 0]
//! ```
//!
//! The QR factors of `B_hat` come for free: `Q_hat = [Q1 Q2]`,
//! `R_hat = [[R, 0], [0, r_min I]]`. The virtual controls are pinned to zero
//! later via the paired inequalities `u* <= 0`, `u* >= 0`, which keeps the
//! equality constraint matrix square where it matters.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("transfer matrix is rank deficient: |R[{index},{index}]| = {value:e} below threshold {threshold:e}")]
    RankDeficient {
        index: usize,
        value: f64,
        threshold: f64,
    },
    #[error("transfer matrix must be tall or square: n_u = {n_u} > n_x = {n_x}")]
    TooManyControls { n_u: usize, n_x: usize },
    #[error("rhs has {got} rows, expected {expected}")]
    RhsRows { expected: usize, got: usize },
}

/// Virtual-control augmentation data for one plant.
#[derive(Debug, Clone)]
pub struct Augmentation {
    n_x: usize,
    n_u: usize,
    /// `[B  Q2 * r_min]`, square and invertible.
    b_hat: DMatrix<f64>,
    /// Full orthogonal factor `[Q1 Q2]` of the original transfer matrix.
    q_hat: DMatrix<f64>,
    /// `[[R, 0], [0, r_min I]]`, upper triangular and invertible.
    r_hat: DMatrix<f64>,
    /// Smallest `|diagonal|` entry of the R factor of the original transfer
    /// matrix.
    r_min: f64,
    /// Weight applied to the virtual block of the augmented control cost.
    virtual_weight: f64,
}

impl Augmentation {
    /// Build the augmentation from a full-column-rank transfer matrix.
    pub fn build(b_ue: &DMatrix<f64>) -> Result<Self, AugmentError> {
        Self::build_weighted(b_ue, 1.0)
    }

    /// As [`Self::build`], with an explicit weight for the virtual block of
    /// the augmented control cost (the plain identity block is the default).
    pub fn build_weighted(b_ue: &DMatrix<f64>, virtual_weight: f64) -> Result<Self, AugmentError> {
        let n_x = b_ue.nrows();
        let n_u = b_ue.ncols();
        if n_u > n_x {
            return Err(AugmentError::TooManyControls { n_u, n_x });
        }

        let qr = b_ue.clone().qr();
        let r = qr.r();
        // Full Q, including the orthogonal complement columns Q2.
        let mut qt = DMatrix::identity(n_x, n_x);
        qr.q_tr_mul(&mut qt);
        let q_full = qt.transpose();

        let threshold = 1e-12 * b_ue.norm().max(1e-300);
        let mut r_min = f64::INFINITY;
        for i in 0..n_u {
            let d = r[(i, i)].abs();
            if d < threshold {
                return Err(AugmentError::RankDeficient {
                    index: i,
                    value: d,
                    threshold,
                });
            }
            r_min = r_min.min(d);
        }

        let n_virtual = n_x - n_u;
        let mut b_hat = DMatrix::zeros(n_x, n_x);
        b_hat.view_mut((0, 0), (n_x, n_u)).copy_from(b_ue);
        if n_virtual > 0 {
            let q2 = q_full.view((0, n_u), (n_x, n_virtual));
            b_hat
                .view_mut((0, n_u), (n_x, n_virtual))
                .copy_from(&(q2 * r_min));
        }

        let mut r_hat = DMatrix::zeros(n_x, n_x);
        r_hat
            .view_mut((0, 0), (n_u, n_u))
            .copy_from(&r.view((0, 0), (n_u, n_u)));
        for i in n_u..n_x {
            r_hat[(i, i)] = r_min;
        }

        Ok(Self {
            n_x,
            n_u,
            b_hat,
            q_hat: q_full,
            r_hat,
            r_min,
            virtual_weight,
        })
    }

    pub fn n_x(&self) -> usize {
        self.n_x
    }

    pub fn n_u(&self) -> usize {
        self.n_u
    }

    /// Number of virtual controls, `n_x - n_u`.
    pub fn n_virtual(&self) -> usize {
        self.n_x - self.n_u
    }

    pub fn b_hat(&self) -> &DMatrix<f64> {
        &self.b_hat
    }

    pub fn q_hat(&self) -> &DMatrix<f64> {
        &self.q_hat
    }

    pub fn r_hat(&self) -> &DMatrix<f64> {
        &self.r_hat
    }

    pub fn r_min(&self) -> f64 {
        self.r_min
    }

    /// Positions of the original controls within an augmented control block.
    pub fn original_indices(&self) -> std::ops::Range<usize> {
        0..self.n_u
    }

    /// Positions of the virtual controls within an augmented control block.
    pub fn virtual_indices(&self) -> std::ops::Range<usize> {
        self.n_u..self.n_x
    }

    /// Diagonal-ratio condition estimate of `B_hat` from its R factor.
    pub fn kappa(&self) -> f64 {
        let mut lo = f64::INFINITY;
        let mut hi: f64 = 0.0;
        for i in 0..self.n_x {
            let d = self.r_hat[(i, i)].abs();
            lo = lo.min(d);
            hi = hi.max(d);
        }
        hi / lo
    }

    /// Augmented control cost `diag(U, w I)` for a given original weight.
    pub fn extend_control_weight(&self, u_ctl: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.n_x, self.n_x);
        out.view_mut((0, 0), (self.n_u, self.n_u)).copy_from(u_ctl);
        for i in self.n_u..self.n_x {
            out[(i, i)] = self.virtual_weight;
        }
        out
    }

    /// Augmented linear control cost `[r; 0]`.
    pub fn extend_control_linear(&self, r: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.n_x);
        out.rows_mut(0, self.n_u).copy_from(r);
        out
    }

    /// Augmented cross cost `[S  0]` (n_x rows, n_x columns).
    pub fn extend_cross_cost(&self, s: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.n_x, self.n_x);
        out.view_mut((0, 0), (self.n_x, self.n_u)).copy_from(s);
        out
    }

    /// Augmented stage inequality transfer block `[B_ui  0]`.
    pub fn extend_inequality_transfer(&self, b_ui: &DMatrix<f64>) -> DMatrix<f64> {
        let m = b_ui.nrows();
        let mut out = DMatrix::zeros(m, self.n_x);
        out.view_mut((0, 0), (m, self.n_u)).copy_from(b_ui);
        out
    }

    /// `B_hat^{-1} * rhs` computed as `R_hat^{-1} (Q_hat^T rhs)`; no explicit
    /// inverse is ever formed.
    pub fn solve_bhat(&self, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>, AugmentError> {
        if rhs.nrows() != self.n_x {
            return Err(AugmentError::RhsRows {
                expected: self.n_x,
                got: rhs.nrows(),
            });
        }
        let qt_rhs = self.q_hat.transpose() * rhs;
        // r_hat is invertible by construction.
        Ok(self
            .r_hat
            .solve_upper_triangular(&qt_rhs)
            .expect("R_hat invertible by construction"))
    }

    /// `B_hat^{-T} * rhs` via `Q_hat (R_hat^{-T} rhs)`.
    pub fn solve_bhat_transpose(&self, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>, AugmentError> {
        if rhs.nrows() != self.n_x {
            return Err(AugmentError::RhsRows {
                expected: self.n_x,
                got: rhs.nrows(),
            });
        }
        let s = self
            .r_hat
            .tr_solve_upper_triangular(rhs)
            .expect("R_hat invertible by construction");
        Ok(&self.q_hat * s)
    }

    pub fn solve_bhat_vec(&self, rhs: &DVector<f64>) -> Result<DVector<f64>, AugmentError> {
        let m = DMatrix::from_column_slice(rhs.len(), 1, rhs.as_slice());
        Ok(DVector::from_column_slice(self.solve_bhat(&m)?.as_slice()))
    }
}
