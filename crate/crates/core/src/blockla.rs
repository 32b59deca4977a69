//! Symmetric block-tridiagonal matrices and their block Cholesky factorization.
//!
//! The projected normal equations have the form
//!
//! ```text
//! Y = [ Y11  Y21^T            ]
//!     [ Y21  Y22   Y32^T      ]
//!     [      Y32   Y33   ...  ]
//! ```
//!
//! with square blocks of a fixed size. The factor `Y = L L^T` is lower block
//! bidiagonal and is computed stage by stage, so both the factorization and
//! the solves cost O(T) in the number of blocks.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BlockLaError {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("block {block}: pivot not positive definite")]
    NotPositiveDefinite { block: usize },
}

/// A per-stage contribution to a block-tridiagonal accumulation.
#[derive(Debug, Clone)]
pub enum BlockPart {
    /// Added to diagonal block `i`.
    Diag(usize, DMatrix<f64>),
    /// Added to subdiagonal block `(i+1, i)`.
    Sub(usize, DMatrix<f64>),
}

/// Symmetric block-tridiagonal matrix with `nblocks` diagonal blocks of size
/// `block_size` and `nblocks - 1` subdiagonal blocks.
///
/// Diagonal blocks are symmetrized as `(B + B^T)/2` on construction; the
/// products that feed them are symmetric up to floating-point accumulation
/// order.
#[derive(Debug, Clone)]
pub struct BlockTriDiagSym {
    block_size: usize,
    diag: Vec<DMatrix<f64>>,
    sub: Vec<DMatrix<f64>>,
}

impl BlockTriDiagSym {
    pub fn new(diag: Vec<DMatrix<f64>>, sub: Vec<DMatrix<f64>>) -> Result<Self, BlockLaError> {
        if diag.is_empty() {
            return Err(BlockLaError::Dimension {
                what: "diagonal block count",
                expected: 1,
                got: 0,
            });
        }
        let b = diag[0].nrows();
        if sub.len() + 1 != diag.len() {
            return Err(BlockLaError::Dimension {
                what: "subdiagonal block count",
                expected: diag.len() - 1,
                got: sub.len(),
            });
        }
        for m in &diag {
            if m.nrows() != b || m.ncols() != b {
                return Err(BlockLaError::Dimension {
                    what: "diagonal block size",
                    expected: b,
                    got: m.nrows().max(m.ncols()),
                });
            }
        }
        for m in &sub {
            if m.nrows() != b || m.ncols() != b {
                return Err(BlockLaError::Dimension {
                    what: "subdiagonal block size",
                    expected: b,
                    got: m.nrows().max(m.ncols()),
                });
            }
        }
        let mut out = Self {
            block_size: b,
            diag,
            sub,
        };
        out.symmetrize();
        Ok(out)
    }

    pub fn zeros(block_size: usize, nblocks: usize) -> Self {
        assert!(nblocks >= 1 && block_size >= 1);
        Self {
            block_size,
            diag: vec![DMatrix::zeros(block_size, block_size); nblocks],
            sub: vec![DMatrix::zeros(block_size, block_size); nblocks - 1],
        }
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn nblocks(&self) -> usize {
        self.diag.len()
    }

    pub fn dim(&self) -> usize {
        self.block_size * self.diag.len()
    }

    pub fn diag_block(&self, i: usize) -> &DMatrix<f64> {
        &self.diag[i]
    }

    /// Subdiagonal block `(i+1, i)`.
    pub fn sub_block(&self, i: usize) -> &DMatrix<f64> {
        &self.sub[i]
    }

    /// Overwrite all blocks with those of `other` (same shape), avoiding
    /// reallocation. Used to reset a per-iteration buffer to the precomputed
    /// constant part.
    pub fn copy_from(&mut self, other: &Self) {
        assert_eq!(self.block_size, other.block_size);
        assert_eq!(self.diag.len(), other.diag.len());
        for (d, s) in self.diag.iter_mut().zip(&other.diag) {
            d.copy_from(s);
        }
        for (d, s) in self.sub.iter_mut().zip(&other.sub) {
            d.copy_from(s);
        }
    }

    pub fn add_to_diag(&mut self, i: usize, m: &DMatrix<f64>) {
        self.diag[i] += m;
    }

    pub fn add_to_sub(&mut self, i: usize, m: &DMatrix<f64>) {
        self.sub[i] += m;
    }

    /// Re-symmetrize the diagonal blocks as `(B + B^T)/2`.
    pub fn symmetrize(&mut self) {
        for d in &mut self.diag {
            let dt = d.transpose();
            *d += dt;
            *d *= 0.5;
        }
    }

    pub fn densify(&self) -> DMatrix<f64> {
        let b = self.block_size;
        let n = self.dim();
        let mut out = DMatrix::zeros(n, n);
        for (i, d) in self.diag.iter().enumerate() {
            out.view_mut((i * b, i * b), (b, b)).copy_from(d);
        }
        for (i, s) in self.sub.iter().enumerate() {
            out.view_mut(((i + 1) * b, i * b), (b, b)).copy_from(s);
            out.view_mut((i * b, (i + 1) * b), (b, b))
                .copy_from(&s.transpose());
        }
        out
    }

    /// `Y * x` without densifying.
    pub fn mul_vec(&self, x: &DVector<f64>) -> DVector<f64> {
        let b = self.block_size;
        assert_eq!(x.len(), self.dim());
        let mut out = DVector::zeros(self.dim());
        for i in 0..self.diag.len() {
            let xi = x.rows(i * b, b);
            let mut oi = out.rows_mut(i * b, b);
            oi.gemv(1.0, &self.diag[i], &xi, 1.0);
        }
        for (i, s) in self.sub.iter().enumerate() {
            let xi = x.rows(i * b, b);
            let xj = x.rows((i + 1) * b, b);
            out.rows_mut((i + 1) * b, b).gemv(1.0, s, &xi, 1.0);
            out.rows_mut(i * b, b).gemv_tr(1.0, s, &xj, 1.0);
        }
        out
    }

    /// Block Cholesky `Y = L L^T`.
    ///
    /// Recursion: `L11 = chol(Y11)`, then for each stage solve
    /// `L(i,i-1) L(i-1,i-1)^T = Y(i,i-1)` by substitution and factor
    /// `L(i,i) = chol(Y(i,i) - L(i,i-1) L(i,i-1)^T)`.
    pub fn block_cholesky(&self) -> Result<BlockCholFactor, BlockLaError> {
        self.block_cholesky_shifted(0.0)
    }

    /// Same as [`Self::block_cholesky`] with `shift * I` added to every
    /// diagonal block. The default shift is zero; the knob exists for
    /// robustness experiments only.
    pub fn block_cholesky_shifted(&self, shift: f64) -> Result<BlockCholFactor, BlockLaError> {
        let b = self.block_size;
        let t = self.diag.len();
        let mut diag_l = Vec::with_capacity(t);
        let mut sub_l = Vec::with_capacity(t - 1);

        let mut first = self.diag[0].clone();
        if shift != 0.0 {
            for k in 0..b {
                first[(k, k)] += shift;
            }
        }
        let l0 = first
            .cholesky()
            .ok_or(BlockLaError::NotPositiveDefinite { block: 0 })?;
        diag_l.push(l0.unpack());

        for i in 1..t {
            // L(i,i-1) = Y(i,i-1) L(i-1,i-1)^{-T}: solve L(i-1) Z = Y(i,i-1)^T, take Z^T.
            let prev: &DMatrix<f64> = &diag_l[i - 1];
            let z = prev
                .solve_lower_triangular(&self.sub[i - 1].transpose())
                .ok_or(BlockLaError::NotPositiveDefinite { block: i })?;
            let l_sub = z.transpose();

            let mut s = self.diag[i].clone();
            s.gemm(-1.0, &l_sub, &l_sub.transpose(), 1.0);
            if shift != 0.0 {
                for k in 0..b {
                    s[(k, k)] += shift;
                }
            }
            let li = s
                .cholesky()
                .ok_or(BlockLaError::NotPositiveDefinite { block: i })?;
            diag_l.push(li.unpack());
            sub_l.push(l_sub);
        }

        Ok(BlockCholFactor {
            block_size: b,
            diag_l,
            sub_l,
        })
    }
}

/// Accumulate per-stage contributions into a symmetric block-tridiagonal
/// matrix without ever forming a dense matrix.
pub fn block_tridiag_from_products(
    block_size: usize,
    nblocks: usize,
    parts: impl IntoIterator<Item = BlockPart>,
) -> Result<BlockTriDiagSym, BlockLaError> {
    let mut out = BlockTriDiagSym::zeros(block_size, nblocks);
    for part in parts {
        match part {
            BlockPart::Diag(i, m) => {
                if m.nrows() != block_size || m.ncols() != block_size {
                    return Err(BlockLaError::Dimension {
                        what: "diagonal contribution",
                        expected: block_size,
                        got: m.nrows().max(m.ncols()),
                    });
                }
                if i >= nblocks {
                    return Err(BlockLaError::Dimension {
                        what: "diagonal block index",
                        expected: nblocks - 1,
                        got: i,
                    });
                }
                out.add_to_diag(i, &m);
            }
            BlockPart::Sub(i, m) => {
                if m.nrows() != block_size || m.ncols() != block_size {
                    return Err(BlockLaError::Dimension {
                        what: "subdiagonal contribution",
                        expected: block_size,
                        got: m.nrows().max(m.ncols()),
                    });
                }
                if i + 1 >= nblocks {
                    return Err(BlockLaError::Dimension {
                        what: "subdiagonal block index",
                        expected: nblocks.saturating_sub(2),
                        got: i,
                    });
                }
                out.add_to_sub(i, &m);
            }
        }
    }
    out.symmetrize();
    Ok(out)
}

/// Lower block-bidiagonal Cholesky factor of a [`BlockTriDiagSym`].
#[derive(Debug, Clone)]
pub struct BlockCholFactor {
    block_size: usize,
    diag_l: Vec<DMatrix<f64>>,
    sub_l: Vec<DMatrix<f64>>,
}

impl BlockCholFactor {
    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn nblocks(&self) -> usize {
        self.diag_l.len()
    }

    pub fn diag_block(&self, i: usize) -> &DMatrix<f64> {
        &self.diag_l[i]
    }

    pub fn sub_block(&self, i: usize) -> &DMatrix<f64> {
        &self.sub_l[i]
    }

    pub fn densify(&self) -> DMatrix<f64> {
        let b = self.block_size;
        let n = b * self.diag_l.len();
        let mut out = DMatrix::zeros(n, n);
        for (i, d) in self.diag_l.iter().enumerate() {
            out.view_mut((i * b, i * b), (b, b)).copy_from(d);
        }
        for (i, s) in self.sub_l.iter().enumerate() {
            out.view_mut(((i + 1) * b, i * b), (b, b)).copy_from(s);
        }
        out
    }

    /// Solve `L L^T z = rhs` by a forward then a backward block sweep.
    pub fn solve(&self, rhs: &DVector<f64>) -> Result<DVector<f64>, BlockLaError> {
        let b = self.block_size;
        let t = self.diag_l.len();
        if rhs.len() != b * t {
            return Err(BlockLaError::Dimension {
                what: "rhs length",
                expected: b * t,
                got: rhs.len(),
            });
        }

        // Forward: L y = rhs.
        let mut y = rhs.clone();
        for i in 0..t {
            if i > 0 {
                let (head, mut tail) = y.rows_range_pair_mut(..i * b, i * b..);
                let prev = head.rows((i - 1) * b, b);
                tail.rows_mut(0, b).gemv(-1.0, &self.sub_l[i - 1], &prev, 1.0);
            }
            let yi = self.diag_l[i]
                .solve_lower_triangular(&y.rows(i * b, b).clone_owned())
                .ok_or(BlockLaError::NotPositiveDefinite { block: i })?;
            y.rows_mut(i * b, b).copy_from(&yi);
        }

        // Backward: L^T z = y.
        let mut z = y;
        for i in (0..t).rev() {
            if i + 1 < t {
                let (mut head, tail) = z.rows_range_pair_mut(..(i + 1) * b, (i + 1) * b..);
                let next = tail.rows(0, b);
                head.rows_mut(i * b, b)
                    .gemv_tr(-1.0, &self.sub_l[i], &next, 1.0);
            }
            let zi = self.diag_l[i]
                .tr_solve_lower_triangular(&z.rows(i * b, b).clone_owned())
                .ok_or(BlockLaError::NotPositiveDefinite { block: i })?;
            z.rows_mut(i * b, b).copy_from(&zi);
        }
        Ok(z)
    }
}
