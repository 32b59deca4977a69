//! Receding-horizon problem data and its assembly into a block QP.
//!
//! The plant is time-invariant,
//!
//! ```text
//! x(t+1) = A x(t) + B u(t) + c,
//! ```
//!
//! with stage cost `1/2 [x;u]^T [[Q,S],[S^T,U]] [x;u] + q^T x + r^T u`,
//! terminal cost from `Q_f, q_f`, and stage inequalities
//! `A_xi x + B_ui u >= b_xui`. Over a horizon `T` this condenses to
//!
//! ```text
//! min  1/2 y^T H y + g^T y   s.t.  A_e y = b_e,  A_i y >= b_i
//! ```
//!
//! with `y = [u(0), x(1), u(1), ..., u(T-1), x(T)]`. All matrices are stored
//! once (time-invariance) and applied block-wise; nothing on the solve path
//! densifies `H`, `A_e` or `A_i`. Densified copies are available for test
//! oracles only.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ProblemError {
    #[error("field {field}: expected {expected} entries, got {got}")]
    BadShape {
        field: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("field {field}: {reason}")]
    Invalid { field: &'static str, reason: String },
    #[error("vector length mismatch: expected {expected}, got {got}")]
    BadLength { expected: usize, got: usize },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Stage-wise time-invariant plant, costs, and inequality data.
#[derive(Debug, Clone)]
pub struct MpcProblem {
    /// System matrix (n_x × n_x).
    pub a_xe: DMatrix<f64>,
    /// Transfer matrix (n_x × n_u), full column rank.
    pub b_ue: DMatrix<f64>,
    /// State cost (n_x × n_x), symmetric positive definite.
    pub q_cost: DMatrix<f64>,
    /// Control cost (n_u × n_u), symmetric positive definite.
    pub u_cost: DMatrix<f64>,
    /// Cross cost (n_x × n_u).
    pub s_cost: DMatrix<f64>,
    /// Linear state cost (n_x).
    pub q_lin: DVector<f64>,
    /// Linear control cost (n_u).
    pub r_lin: DVector<f64>,
    /// Terminal state cost (n_x × n_x), symmetric positive semidefinite.
    pub qf_cost: DMatrix<f64>,
    /// Terminal linear cost (n_x).
    pub qf_lin: DVector<f64>,
    /// Stage inequality state coefficients (m_i × n_x).
    pub a_xi: DMatrix<f64>,
    /// Stage inequality control coefficients (m_i × n_u).
    pub b_ui: DMatrix<f64>,
    /// Stage inequality right-hand side (m_i).
    pub b_xui: DVector<f64>,
    /// Terminal inequality right-hand side (m_i), paired with `a_xi`.
    pub b_xui_f: DVector<f64>,
    /// Constant disturbance (n_x), held fixed over the horizon.
    pub c: DVector<f64>,
    /// Horizon length, >= 1.
    pub horizon: usize,
    /// Current measured state (n_x).
    pub x0: DVector<f64>,
}

#[derive(Serialize, Deserialize)]
struct ProblemJson {
    n_x: usize,
    n_u: usize,
    #[serde(rename = "T")]
    t: usize,
    #[serde(rename = "A_xe")]
    a_xe: Vec<f64>,
    #[serde(rename = "B_ue")]
    b_ue: Vec<f64>,
    #[serde(rename = "Q")]
    q: Vec<f64>,
    #[serde(rename = "U")]
    u: Vec<f64>,
    #[serde(rename = "S", default, skip_serializing_if = "Option::is_none")]
    s: Option<Vec<f64>>,
    #[serde(rename = "q", default, skip_serializing_if = "Option::is_none")]
    q_vec: Option<Vec<f64>>,
    #[serde(rename = "r", default, skip_serializing_if = "Option::is_none")]
    r_vec: Option<Vec<f64>>,
    #[serde(rename = "Q_f", default, skip_serializing_if = "Option::is_none")]
    q_f: Option<Vec<f64>>,
    #[serde(rename = "q_f", default, skip_serializing_if = "Option::is_none")]
    q_f_lin: Option<Vec<f64>>,
    #[serde(rename = "A_xi")]
    a_xi: Vec<f64>,
    #[serde(rename = "B_ui")]
    b_ui: Vec<f64>,
    b_xui: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    b_xui_f: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    c: Option<Vec<f64>>,
    x0: Vec<f64>,
}

fn mat_from_row_major(
    field: &'static str,
    rows: usize,
    cols: usize,
    data: &[f64],
) -> Result<DMatrix<f64>, ProblemError> {
    if data.len() != rows * cols {
        return Err(ProblemError::BadShape {
            field,
            expected: rows * cols,
            got: data.len(),
        });
    }
    Ok(DMatrix::from_row_slice(rows, cols, data))
}

fn vec_checked(field: &'static str, len: usize, data: &[f64]) -> Result<DVector<f64>, ProblemError> {
    if data.len() != len {
        return Err(ProblemError::BadShape {
            field,
            expected: len,
            got: data.len(),
        });
    }
    Ok(DVector::from_column_slice(data))
}

fn check_symmetric(field: &'static str, m: &DMatrix<f64>) -> Result<(), ProblemError> {
    let scale = m.amax().max(1.0);
    if (m - m.transpose()).amax() > 1e-12 * scale {
        return Err(ProblemError::Invalid {
            field,
            reason: "matrix is not symmetric".into(),
        });
    }
    Ok(())
}

fn check_full_rank_qr(field: &'static str, m: &DMatrix<f64>) -> Result<(), ProblemError> {
    let qr = m.clone().qr();
    let r = qr.r();
    let threshold = 1e-12 * m.norm().max(1e-300);
    for i in 0..m.ncols().min(m.nrows()) {
        if r[(i, i)].abs() < threshold {
            return Err(ProblemError::Invalid {
                field,
                reason: format!("rank deficient (|R[{i},{i}]| = {:e})", r[(i, i)].abs()),
            });
        }
    }
    Ok(())
}

impl MpcProblem {
    pub fn n_x(&self) -> usize {
        self.a_xe.nrows()
    }

    pub fn n_u(&self) -> usize {
        self.b_ue.ncols()
    }

    pub fn m_i(&self) -> usize {
        self.b_xui.len()
    }

    /// Check all structural invariants, naming the offending field.
    pub fn validate(&self) -> Result<(), ProblemError> {
        let n_x = self.n_x();
        let n_u = self.n_u();
        let m_i = self.m_i();

        if self.horizon < 1 {
            return Err(ProblemError::Invalid {
                field: "T",
                reason: "horizon must be >= 1".into(),
            });
        }
        if n_u > n_x || n_u == 0 {
            return Err(ProblemError::Invalid {
                field: "B_ue",
                reason: format!("need 1 <= n_u <= n_x, got n_u = {n_u}, n_x = {n_x}"),
            });
        }

        let shapes: [(&'static str, usize, usize, usize, usize); 8] = [
            ("A_xe", self.a_xe.nrows(), self.a_xe.ncols(), n_x, n_x),
            ("B_ue", self.b_ue.nrows(), self.b_ue.ncols(), n_x, n_u),
            ("Q", self.q_cost.nrows(), self.q_cost.ncols(), n_x, n_x),
            ("U", self.u_cost.nrows(), self.u_cost.ncols(), n_u, n_u),
            ("S", self.s_cost.nrows(), self.s_cost.ncols(), n_x, n_u),
            ("Q_f", self.qf_cost.nrows(), self.qf_cost.ncols(), n_x, n_x),
            ("A_xi", self.a_xi.nrows(), self.a_xi.ncols(), m_i, n_x),
            ("B_ui", self.b_ui.nrows(), self.b_ui.ncols(), m_i, n_u),
        ];
        for (field, rows, cols, want_r, want_c) in shapes {
            if rows != want_r || cols != want_c {
                return Err(ProblemError::BadShape {
                    field,
                    expected: want_r * want_c,
                    got: rows * cols,
                });
            }
        }
        let vecs: [(&'static str, usize, usize); 6] = [
            ("q", self.q_lin.len(), n_x),
            ("r", self.r_lin.len(), n_u),
            ("q_f", self.qf_lin.len(), n_x),
            ("b_xui_f", self.b_xui_f.len(), m_i),
            ("c", self.c.len(), n_x),
            ("x0", self.x0.len(), n_x),
        ];
        for (field, got, want) in vecs {
            if got != want {
                return Err(ProblemError::BadShape {
                    field,
                    expected: want,
                    got,
                });
            }
        }

        check_symmetric("Q", &self.q_cost)?;
        check_symmetric("U", &self.u_cost)?;
        check_symmetric("Q_f", &self.qf_cost)?;
        if self.q_cost.clone().cholesky().is_none() {
            return Err(ProblemError::Invalid {
                field: "Q",
                reason: "not positive definite".into(),
            });
        }
        if self.u_cost.clone().cholesky().is_none() {
            return Err(ProblemError::Invalid {
                field: "U",
                reason: "not positive definite".into(),
            });
        }
        let eig = self.qf_cost.clone().symmetric_eigenvalues();
        let min_eig = eig.min();
        if min_eig < -1e-10 * self.qf_cost.amax().max(1.0) {
            return Err(ProblemError::Invalid {
                field: "Q_f",
                reason: format!("not positive semidefinite (min eigenvalue {min_eig:e})"),
            });
        }
        check_full_rank_qr("A_xe", &self.a_xe)?;
        check_full_rank_qr("B_ue", &self.b_ue)?;
        Ok(())
    }

    pub fn from_json_str(json: &str) -> Result<Self, ProblemError> {
        let raw: ProblemJson = serde_json::from_str(json)?;
        Self::from_raw(raw)
    }

    pub fn from_json_file(path: impl AsRef<std::path::Path>) -> Result<Self, ProblemError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json_str(&text)
    }

    pub fn to_json_string(&self) -> Result<String, ProblemError> {
        let n_x = self.n_x();
        let n_u = self.n_u();
        let raw = ProblemJson {
            n_x,
            n_u,
            t: self.horizon,
            a_xe: row_major(&self.a_xe),
            b_ue: row_major(&self.b_ue),
            q: row_major(&self.q_cost),
            u: row_major(&self.u_cost),
            s: Some(row_major(&self.s_cost)),
            q_vec: Some(self.q_lin.as_slice().to_vec()),
            r_vec: Some(self.r_lin.as_slice().to_vec()),
            q_f: Some(row_major(&self.qf_cost)),
            q_f_lin: Some(self.qf_lin.as_slice().to_vec()),
            a_xi: row_major(&self.a_xi),
            b_ui: row_major(&self.b_ui),
            b_xui: self.b_xui.as_slice().to_vec(),
            b_xui_f: Some(self.b_xui_f.as_slice().to_vec()),
            c: Some(self.c.as_slice().to_vec()),
            x0: self.x0.as_slice().to_vec(),
        };
        Ok(serde_json::to_string_pretty(&raw)?)
    }

    fn from_raw(raw: ProblemJson) -> Result<Self, ProblemError> {
        let n_x = raw.n_x;
        let n_u = raw.n_u;
        let m_i = raw.b_xui.len();

        let q_lin = match &raw.q_vec {
            Some(v) => vec_checked("q", n_x, v)?,
            None => DVector::zeros(n_x),
        };
        let q_cost = mat_from_row_major("Q", n_x, n_x, &raw.q)?;

        let prob = Self {
            a_xe: mat_from_row_major("A_xe", n_x, n_x, &raw.a_xe)?,
            b_ue: mat_from_row_major("B_ue", n_x, n_u, &raw.b_ue)?,
            u_cost: mat_from_row_major("U", n_u, n_u, &raw.u)?,
            s_cost: match &raw.s {
                Some(v) => mat_from_row_major("S", n_x, n_u, v)?,
                None => DMatrix::zeros(n_x, n_u),
            },
            r_lin: match &raw.r_vec {
                Some(v) => vec_checked("r", n_u, v)?,
                None => DVector::zeros(n_u),
            },
            qf_cost: match &raw.q_f {
                Some(v) => mat_from_row_major("Q_f", n_x, n_x, v)?,
                None => q_cost.clone(),
            },
            qf_lin: match &raw.q_f_lin {
                Some(v) => vec_checked("q_f", n_x, v)?,
                None => q_lin.clone(),
            },
            a_xi: mat_from_row_major("A_xi", m_i, n_x, &raw.a_xi)?,
            b_ui: mat_from_row_major("B_ui", m_i, n_u, &raw.b_ui)?,
            b_xui_f: match &raw.b_xui_f {
                Some(v) => vec_checked("b_xui_f", m_i, v)?,
                None => DVector::from_column_slice(&raw.b_xui),
            },
            b_xui: DVector::from_column_slice(&raw.b_xui),
            c: match &raw.c {
                Some(v) => vec_checked("c", n_x, v)?,
                None => DVector::zeros(n_x),
            },
            horizon: raw.t,
            x0: vec_checked("x0", n_x, &raw.x0)?,
            q_cost,
            q_lin,
        };
        prob.validate()?;
        Ok(prob)
    }
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.nrows() * m.ncols());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.push(m[(i, j)]);
        }
    }
    out
}

/// The assembled block QP. Control blocks have width `n_c`: the state
/// dimension when virtual controls are appended, the original control count
/// otherwise (the classical solver runs on the unaugmented problem).
///
/// Variable layout: `y = [u(0), x(1), u(1), x(2), ..., u(T-1), x(T)]`.
/// Inequality layout: `T` stage blocks of `m_stage` rows (stage data plus the
/// paired `u* <= 0`, `u* >= 0` rows) followed by one terminal block of `m_i`
/// rows on `x(T)`.
#[derive(Debug, Clone)]
pub struct StructuredQp {
    n_x: usize,
    n_c: usize,
    n_u: usize,
    horizon: usize,
    m_stage: usize,
    m_i: usize,
    n_virtual: usize,

    u_weight: DMatrix<f64>,
    q_weight: DMatrix<f64>,
    s_cross: DMatrix<f64>,
    qf_weight: DMatrix<f64>,
    g_first: DVector<f64>,
    g_q: DVector<f64>,
    g_r: DVector<f64>,
    g_qf: DVector<f64>,

    a_xe: DMatrix<f64>,
    b_transfer: DMatrix<f64>,
    b_e_first: DVector<f64>,
    c_dist: DVector<f64>,

    ai_x: DMatrix<f64>,
    ai_u: DMatrix<f64>,
    bi_first: DVector<f64>,
    bi_stage: DVector<f64>,
    ai_term: DMatrix<f64>,
    bi_term: DVector<f64>,
}

/// Assemble the block QP over the augmented control `u_hat = [u; u*]`.
///
/// The first blocks of `g`, `b_e`, `b_i` absorb the measured state:
/// `g(0) = r_hat + 2 S_hat^T x0`, `b_e(0) = A x0 + c`,
/// `b_i(0) = b_xui - A_xi x0`. Every stage gains the paired virtual rows
/// `-u* >= 0` and `u* >= 0`.
pub fn assemble_qp(
    prob: &MpcProblem,
    aug: &crate::augment::Augmentation,
) -> Result<StructuredQp, ProblemError> {
    prob.validate()?;
    if aug.n_x() != prob.n_x() || aug.n_u() != prob.n_u() {
        return Err(ProblemError::Invalid {
            field: "augmentation",
            reason: format!(
                "augmentation is {}x{}, problem is {}x{}",
                aug.n_x(),
                aug.n_u(),
                prob.n_x(),
                prob.n_u()
            ),
        });
    }
    let b_orig = aug.b_hat().view((0, 0), (prob.n_x(), prob.n_u()));
    if (b_orig - &prob.b_ue).amax() > 1e-12 * prob.b_ue.amax().max(1.0) {
        return Err(ProblemError::Invalid {
            field: "augmentation",
            reason: "augmentation was built from a different transfer matrix".into(),
        });
    }

    let n_x = prob.n_x();
    let n_u = prob.n_u();
    let n_c = n_x;
    let n_virtual = aug.n_virtual();
    let m_i = prob.m_i();
    let m_stage = m_i + 2 * n_virtual;

    // [A_xi; 0; 0] and [B_ui 0; 0 -I; 0 +I]: virtual rows carry +-I on the
    // u* sub-block and zeros elsewhere.
    let mut ai_x = DMatrix::zeros(m_stage, n_x);
    ai_x.view_mut((0, 0), (m_i, n_x)).copy_from(&prob.a_xi);
    let mut ai_u = DMatrix::zeros(m_stage, n_c);
    ai_u.view_mut((0, 0), (m_i, n_u)).copy_from(&prob.b_ui);
    for k in 0..n_virtual {
        ai_u[(m_i + k, n_u + k)] = -1.0;
        ai_u[(m_i + n_virtual + k, n_u + k)] = 1.0;
    }

    let mut bi_first = DVector::zeros(m_stage);
    bi_first
        .rows_mut(0, m_i)
        .copy_from(&(&prob.b_xui - &prob.a_xi * &prob.x0));
    let mut bi_stage = DVector::zeros(m_stage);
    bi_stage.rows_mut(0, m_i).copy_from(&prob.b_xui);

    let s_hat = aug.extend_cross_cost(&prob.s_cost);
    let r_hat = aug.extend_control_linear(&prob.r_lin);
    let g_first = &r_hat + 2.0 * s_hat.transpose() * &prob.x0;

    Ok(StructuredQp {
        n_x,
        n_c,
        n_u,
        horizon: prob.horizon,
        m_stage,
        m_i,
        n_virtual,
        u_weight: aug.extend_control_weight(&prob.u_cost),
        q_weight: prob.q_cost.clone(),
        s_cross: s_hat,
        qf_weight: prob.qf_cost.clone(),
        g_first,
        g_q: prob.q_lin.clone(),
        g_r: r_hat,
        g_qf: prob.qf_lin.clone(),
        a_xe: prob.a_xe.clone(),
        b_transfer: aug.b_hat().clone(),
        b_e_first: &prob.a_xe * &prob.x0 + &prob.c,
        c_dist: prob.c.clone(),
        ai_x,
        ai_u,
        bi_first,
        bi_stage,
        ai_term: prob.a_xi.clone(),
        bi_term: prob.b_xui_f.clone(),
    })
}

/// Assemble the block QP over the original controls, without virtual
/// controls. This is the form the classical normal-equations solver runs on.
pub fn assemble_qp_original(prob: &MpcProblem) -> Result<StructuredQp, ProblemError> {
    prob.validate()?;
    let n_x = prob.n_x();
    let n_u = prob.n_u();
    let m_i = prob.m_i();

    let g_first = &prob.r_lin + 2.0 * prob.s_cost.transpose() * &prob.x0;

    Ok(StructuredQp {
        n_x,
        n_c: n_u,
        n_u,
        horizon: prob.horizon,
        m_stage: m_i,
        m_i,
        n_virtual: 0,
        u_weight: prob.u_cost.clone(),
        q_weight: prob.q_cost.clone(),
        s_cross: prob.s_cost.clone(),
        qf_weight: prob.qf_cost.clone(),
        g_first,
        g_q: prob.q_lin.clone(),
        g_r: prob.r_lin.clone(),
        g_qf: prob.qf_lin.clone(),
        a_xe: prob.a_xe.clone(),
        b_transfer: prob.b_ue.clone(),
        b_e_first: &prob.a_xe * &prob.x0 + &prob.c,
        c_dist: prob.c.clone(),
        ai_x: prob.a_xi.clone(),
        ai_u: prob.b_ui.clone(),
        bi_first: &prob.b_xui - &prob.a_xi * &prob.x0,
        bi_stage: prob.b_xui.clone(),
        ai_term: prob.a_xi.clone(),
        bi_term: prob.b_xui_f.clone(),
    })
}

impl StructuredQp {
    pub fn n_x(&self) -> usize {
        self.n_x
    }

    /// Width of one control block (`n_x` when augmented, `n_u` otherwise).
    pub fn n_c(&self) -> usize {
        self.n_c
    }

    pub fn n_u(&self) -> usize {
        self.n_u
    }

    pub fn n_virtual(&self) -> usize {
        self.n_virtual
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    /// Total primal dimension `T (n_c + n_x)`.
    pub fn n(&self) -> usize {
        self.horizon * (self.n_c + self.n_x)
    }

    /// Number of equality rows `T n_x`.
    pub fn eq_rows(&self) -> usize {
        self.horizon * self.n_x
    }

    /// Inequality rows per stage block.
    pub fn m_stage(&self) -> usize {
        self.m_stage
    }

    /// Rows in the terminal inequality block.
    pub fn m_terminal(&self) -> usize {
        self.m_i
    }

    /// Total inequality rows `T m_stage + m_i`.
    pub fn m_total(&self) -> usize {
        self.horizon * self.m_stage + self.m_i
    }

    pub fn a_xe(&self) -> &DMatrix<f64> {
        &self.a_xe
    }

    pub fn b_transfer(&self) -> &DMatrix<f64> {
        &self.b_transfer
    }

    pub fn u_weight(&self) -> &DMatrix<f64> {
        &self.u_weight
    }

    pub fn q_weight(&self) -> &DMatrix<f64> {
        &self.q_weight
    }

    pub fn s_cross(&self) -> &DMatrix<f64> {
        &self.s_cross
    }

    pub fn qf_weight(&self) -> &DMatrix<f64> {
        &self.qf_weight
    }

    pub fn ai_x(&self) -> &DMatrix<f64> {
        &self.ai_x
    }

    pub fn ai_u(&self) -> &DMatrix<f64> {
        &self.ai_u
    }

    pub fn ai_term(&self) -> &DMatrix<f64> {
        &self.ai_term
    }

    /// Offset of control block `tau` (0-based) within `y`.
    pub fn control_offset(&self, tau: usize) -> usize {
        tau * (self.n_c + self.n_x)
    }

    /// Offset of the state block `x(tau)` for `tau in 1..=T` within `y`.
    pub fn state_offset(&self, tau: usize) -> usize {
        debug_assert!((1..=self.horizon).contains(&tau));
        (tau - 1) * (self.n_c + self.n_x) + self.n_c
    }

    /// Extract the original (non-virtual) controls of each stage.
    pub fn original_controls(&self, y: &DVector<f64>) -> Vec<DVector<f64>> {
        (0..self.horizon)
            .map(|tau| {
                y.rows(self.control_offset(tau), self.n_u).clone_owned()
            })
            .collect()
    }

    /// Largest `|u*|` entry over all stages; zero when not augmented.
    pub fn max_virtual_control(&self, y: &DVector<f64>) -> f64 {
        let mut worst: f64 = 0.0;
        for tau in 0..self.horizon {
            let off = self.control_offset(tau) + self.n_u;
            for k in 0..self.n_virtual {
                worst = worst.max(y[off + k].abs());
            }
        }
        worst
    }

    /// `H y` computed block-wise.
    pub fn apply_h(&self, y: &DVector<f64>) -> DVector<f64> {
        assert_eq!(y.len(), self.n());
        let mut out = DVector::zeros(self.n());
        let t = self.horizon;
        // u(0) block.
        out.rows_mut(0, self.n_c)
            .gemv(1.0, &self.u_weight, &y.rows(0, self.n_c), 0.0);
        // Interior (x, u) pairs.
        for tau in 1..t {
            let xo = self.state_offset(tau);
            let uo = self.control_offset(tau);
            let x = y.rows(xo, self.n_x);
            let u = y.rows(uo, self.n_c);
            {
                let mut ox = out.rows_mut(xo, self.n_x);
                ox.gemv(1.0, &self.q_weight, &x, 0.0);
                ox.gemv(1.0, &self.s_cross, &u, 1.0);
            }
            let mut ou = out.rows_mut(uo, self.n_c);
            ou.gemv_tr(1.0, &self.s_cross, &x, 0.0);
            ou.gemv(1.0, &self.u_weight, &u, 1.0);
        }
        // Terminal state.
        let xo = self.state_offset(t);
        out.rows_mut(xo, self.n_x)
            .gemv(1.0, &self.qf_weight, &y.rows(xo, self.n_x), 0.0);
        out
    }

    /// The block vector `g`.
    pub fn g_vec(&self) -> DVector<f64> {
        let mut g = DVector::zeros(self.n());
        g.rows_mut(0, self.n_c).copy_from(&self.g_first);
        for tau in 1..self.horizon {
            g.rows_mut(self.state_offset(tau), self.n_x)
                .copy_from(&self.g_q);
            g.rows_mut(self.control_offset(tau), self.n_c)
                .copy_from(&self.g_r);
        }
        g.rows_mut(self.state_offset(self.horizon), self.n_x)
            .copy_from(&self.g_qf);
        g
    }

    /// The block vector `b_e = [A x0 + c, c, ..., c]`.
    pub fn b_e_vec(&self) -> DVector<f64> {
        let mut b = DVector::zeros(self.eq_rows());
        b.rows_mut(0, self.n_x).copy_from(&self.b_e_first);
        for tau in 1..self.horizon {
            b.rows_mut(tau * self.n_x, self.n_x).copy_from(&self.c_dist);
        }
        b
    }

    /// The block vector `b_i`, stage blocks then the terminal block.
    pub fn b_i_vec(&self) -> DVector<f64> {
        let mut b = DVector::zeros(self.m_total());
        b.rows_mut(0, self.m_stage).copy_from(&self.bi_first);
        for tau in 1..self.horizon {
            b.rows_mut(tau * self.m_stage, self.m_stage)
                .copy_from(&self.bi_stage);
        }
        b.rows_mut(self.horizon * self.m_stage, self.m_i)
            .copy_from(&self.bi_term);
        b
    }

    /// `A_e y` block-wise.
    pub fn apply_ae(&self, y: &DVector<f64>) -> DVector<f64> {
        assert_eq!(y.len(), self.n());
        let mut out = DVector::zeros(self.eq_rows());
        for tau in 0..self.horizon {
            let mut row = out.rows_mut(tau * self.n_x, self.n_x);
            if tau > 0 {
                row.gemv(-1.0, &self.a_xe, &y.rows(self.state_offset(tau), self.n_x), 0.0);
            }
            row.gemv(
                -1.0,
                &self.b_transfer,
                &y.rows(self.control_offset(tau), self.n_c),
                1.0,
            );
            row += y.rows(self.state_offset(tau + 1), self.n_x);
        }
        out
    }

    /// `A_e^T lam` block-wise.
    pub fn apply_ae_transpose(&self, lam: &DVector<f64>) -> DVector<f64> {
        assert_eq!(lam.len(), self.eq_rows());
        let mut out = DVector::zeros(self.n());
        for tau in 0..self.horizon {
            let l = lam.rows(tau * self.n_x, self.n_x);
            out.rows_mut(self.control_offset(tau), self.n_c)
                .gemv_tr(-1.0, &self.b_transfer, &l, 1.0);
            if tau > 0 {
                out.rows_mut(self.state_offset(tau), self.n_x)
                    .gemv_tr(-1.0, &self.a_xe, &l, 1.0);
            }
            out.rows_mut(self.state_offset(tau + 1), self.n_x)
                .axpy(1.0, &l, 1.0);
        }
        out
    }

    /// `A_i y` block-wise.
    pub fn apply_ai(&self, y: &DVector<f64>) -> DVector<f64> {
        assert_eq!(y.len(), self.n());
        let mut out = DVector::zeros(self.m_total());
        for tau in 0..self.horizon {
            let mut row = out.rows_mut(tau * self.m_stage, self.m_stage);
            if tau > 0 {
                row.gemv(1.0, &self.ai_x, &y.rows(self.state_offset(tau), self.n_x), 0.0);
            }
            row.gemv(
                1.0,
                &self.ai_u,
                &y.rows(self.control_offset(tau), self.n_c),
                1.0,
            );
        }
        if self.m_i > 0 {
            out.rows_mut(self.horizon * self.m_stage, self.m_i).gemv(
                1.0,
                &self.ai_term,
                &y.rows(self.state_offset(self.horizon), self.n_x),
                0.0,
            );
        }
        out
    }

    /// `A_i^T f` block-wise.
    pub fn apply_ai_transpose(&self, f: &DVector<f64>) -> DVector<f64> {
        assert_eq!(f.len(), self.m_total());
        let mut out = DVector::zeros(self.n());
        for tau in 0..self.horizon {
            let fb = f.rows(tau * self.m_stage, self.m_stage);
            out.rows_mut(self.control_offset(tau), self.n_c)
                .gemv_tr(1.0, &self.ai_u, &fb, 1.0);
            if tau > 0 {
                out.rows_mut(self.state_offset(tau), self.n_x)
                    .gemv_tr(1.0, &self.ai_x, &fb, 1.0);
            }
        }
        if self.m_i > 0 {
            let fb = f.rows(self.horizon * self.m_stage, self.m_i);
            out.rows_mut(self.state_offset(self.horizon), self.n_x)
                .gemv_tr(1.0, &self.ai_term, &fb, 1.0);
        }
        out
    }

    /// Densified `H` (test oracle use).
    pub fn densify_h(&self) -> DMatrix<f64> {
        let n = self.n();
        let mut h = DMatrix::zeros(n, n);
        h.view_mut((0, 0), (self.n_c, self.n_c))
            .copy_from(&self.u_weight);
        for tau in 1..self.horizon {
            let xo = self.state_offset(tau);
            let uo = self.control_offset(tau);
            h.view_mut((xo, xo), (self.n_x, self.n_x))
                .copy_from(&self.q_weight);
            h.view_mut((xo, uo), (self.n_x, self.n_c))
                .copy_from(&self.s_cross);
            h.view_mut((uo, xo), (self.n_c, self.n_x))
                .copy_from(&self.s_cross.transpose());
            h.view_mut((uo, uo), (self.n_c, self.n_c))
                .copy_from(&self.u_weight);
        }
        let xo = self.state_offset(self.horizon);
        h.view_mut((xo, xo), (self.n_x, self.n_x))
            .copy_from(&self.qf_weight);
        h
    }

    /// Densified `A_e` (test oracle use).
    pub fn densify_ae(&self) -> DMatrix<f64> {
        let mut a = DMatrix::zeros(self.eq_rows(), self.n());
        for tau in 0..self.horizon {
            let r = tau * self.n_x;
            if tau > 0 {
                a.view_mut((r, self.state_offset(tau)), (self.n_x, self.n_x))
                    .copy_from(&(-&self.a_xe));
            }
            a.view_mut((r, self.control_offset(tau)), (self.n_x, self.n_c))
                .copy_from(&(-&self.b_transfer));
            a.view_mut((r, self.state_offset(tau + 1)), (self.n_x, self.n_x))
                .copy_from(&DMatrix::identity(self.n_x, self.n_x));
        }
        a
    }

    /// Densified `A_i` (test oracle use).
    pub fn densify_ai(&self) -> DMatrix<f64> {
        let mut a = DMatrix::zeros(self.m_total(), self.n());
        for tau in 0..self.horizon {
            let r = tau * self.m_stage;
            if tau > 0 {
                a.view_mut((r, self.state_offset(tau)), (self.m_stage, self.n_x))
                    .copy_from(&self.ai_x);
            }
            a.view_mut((r, self.control_offset(tau)), (self.m_stage, self.n_c))
                .copy_from(&self.ai_u);
        }
        if self.m_i > 0 {
            a.view_mut(
                (
                    self.horizon * self.m_stage,
                    self.state_offset(self.horizon),
                ),
                (self.m_i, self.n_x),
            )
            .copy_from(&self.ai_term);
        }
        a
    }
}

/// `1/2 y^T H y + g^T y`, computed block-wise.
pub fn objective_value(qp: &StructuredQp, y: &DVector<f64>) -> Result<f64, ProblemError> {
    if y.len() != qp.n() {
        return Err(ProblemError::BadLength {
            expected: qp.n(),
            got: y.len(),
        });
    }
    let hy = qp.apply_h(y);
    Ok(0.5 * y.dot(&hy) + qp.g_vec().dot(y))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::Augmentation;

    pub(crate) fn identity_problem(n_x: usize, t: usize) -> MpcProblem {
        MpcProblem {
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
        }
    }

    #[test]
    fn identity_single_stage_equality() {
        // n_x = n_u = 2, B = A = I, T = 1, x0 = 0: A_e densifies to [-I I].
        let prob = identity_problem(2, 1);
        let aug = Augmentation::build(&prob.b_ue).unwrap();
        let qp = assemble_qp(&prob, &aug).unwrap();
        assert_eq!(qp.n(), 4);
        assert_eq!(qp.m_total(), 0);
        let ae = qp.densify_ae();
        let mut expect = DMatrix::zeros(2, 4);
        expect
            .view_mut((0, 0), (2, 2))
            .copy_from(&(-DMatrix::identity(2, 2)));
        expect
            .view_mut((0, 2), (2, 2))
            .copy_from(&DMatrix::identity(2, 2));
        assert!((ae - expect).amax() < 1e-15);
        assert!(qp.b_e_vec().amax() == 0.0);
    }

    #[test]
    fn objective_zero_and_forced() {
        let prob = identity_problem(2, 1);
        let aug = Augmentation::build(&prob.b_ue).unwrap();
        let mut qp = assemble_qp(&prob, &aug).unwrap();
        // H = 2I, g = 0, y = ones (n = 4) -> 1/2 * 2 * 4 = 4.
        qp.u_weight *= 2.0;
        qp.qf_weight *= 2.0;
        let y = DVector::from_element(4, 1.0);
        assert!((objective_value(&qp, &y).unwrap() - 4.0).abs() < 1e-14);
        let z = DVector::zeros(4);
        assert_eq!(objective_value(&qp, &z).unwrap(), 0.0);
    }

    #[test]
    fn objective_rejects_bad_length() {
        let prob = identity_problem(2, 1);
        let aug = Augmentation::build(&prob.b_ue).unwrap();
        let qp = assemble_qp(&prob, &aug).unwrap();
        assert!(objective_value(&qp, &DVector::zeros(5)).is_err());
    }

    #[test]
    fn blockwise_ops_match_dense() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let n_x = 3;
        let n_u = 2;
        let m_i = 4;
        let prob = MpcProblem {
            a_xe: DMatrix::from_fn(n_x, n_x, |i, j| if i == j { 1.0 } else { 0.1 }),
            b_ue: DMatrix::from_fn(n_x, n_u, |i, j| (i + 2 * j) as f64 * 0.3 + 1.0),
            q_cost: DMatrix::identity(n_x, n_x) * 2.0,
            u_cost: DMatrix::identity(n_u, n_u) * 0.5,
            s_cost: DMatrix::from_fn(n_x, n_u, |i, j| 0.05 * (i as f64 - j as f64)),
            q_lin: DVector::from_fn(n_x, |i, _| i as f64 * 0.2),
            r_lin: DVector::from_fn(n_u, |i, _| -(i as f64) * 0.3),
            qf_cost: DMatrix::identity(n_x, n_x),
            qf_lin: DVector::from_element(n_x, 0.1),
            a_xi: DMatrix::from_fn(m_i, n_x, |i, j| ((i + j) % 3) as f64 * 0.4),
            b_ui: DMatrix::from_fn(m_i, n_u, |i, j| ((i * j) % 2) as f64),
            b_xui: DVector::from_element(m_i, -1.0),
            b_xui_f: DVector::from_element(m_i, -2.0),
            c: DVector::from_element(n_x, 0.05),
            horizon: 4,
            x0: DVector::from_fn(n_x, |i, _| 1.0 - i as f64 * 0.4),
        };
        prob.validate().unwrap();
        let aug = Augmentation::build(&prob.b_ue).unwrap();
        let qp = assemble_qp(&prob, &aug).unwrap();

        let y = DVector::from_fn(qp.n(), |_, _| rng.random_range(-1.0..1.0));
        let h = qp.densify_h();
        assert!((qp.apply_h(&y) - &h * &y).amax() < 1e-12);
        assert!((&h - h.transpose()).amax() < 1e-14);

        let ae = qp.densify_ae();
        assert!((qp.apply_ae(&y) - &ae * &y).amax() < 1e-12);
        let lam = DVector::from_fn(qp.eq_rows(), |_, _| rng.random_range(-1.0..1.0));
        assert!((qp.apply_ae_transpose(&lam) - ae.transpose() * &lam).amax() < 1e-12);

        let ai = qp.densify_ai();
        assert!((qp.apply_ai(&y) - &ai * &y).amax() < 1e-12);
        let f = DVector::from_fn(qp.m_total(), |_, _| rng.random_range(-1.0..1.0));
        assert!((qp.apply_ai_transpose(&f) - ai.transpose() * &f).amax() < 1e-12);

        // Block-wise objective equals the dense quadratic form.
        let dense_obj = 0.5 * y.dot(&(&h * &y)) + qp.g_vec().dot(&y);
        let rel = (objective_value(&qp, &y).unwrap() - dense_obj).abs()
            / dense_obj.abs().max(1.0);
        assert!(rel < 1e-12);
    }

    #[test]
    fn virtual_rows_have_unit_pattern() {
        let prob = MpcProblem {
            b_ue: DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
            u_cost: DMatrix::identity(1, 1),
            s_cost: DMatrix::zeros(2, 1),
            r_lin: DVector::zeros(1),
            a_xi: DMatrix::zeros(1, 2),
            b_ui: DMatrix::from_row_slice(1, 1, &[1.0]),
            b_xui: DVector::from_element(1, -0.5),
            b_xui_f: DVector::from_element(1, -0.5),
            ..identity_problem(2, 2)
        };
        let aug = Augmentation::build(&prob.b_ue).unwrap();
        let qp = assemble_qp(&prob, &aug).unwrap();
        assert_eq!(qp.m_stage(), 1 + 2);
        assert_eq!(qp.m_total(), 2 * 3 + 1);
        // Rows 1 and 2 of each stage block are -e_virtual and +e_virtual.
        assert_eq!(qp.ai_u[(1, 1)], -1.0);
        assert_eq!(qp.ai_u[(2, 1)], 1.0);
        assert_eq!(qp.ai_u[(1, 0)], 0.0);
        assert!(qp.ai_x.row(1).amax() == 0.0);
        // Their rhs entries are zero.
        let b = qp.b_i_vec();
        assert_eq!(b[1], 0.0);
        assert_eq!(b[2], 0.0);
    }

    #[test]
    fn json_roundtrip_and_defaults() {
        let json = r#"{
            "n_x": 2, "n_u": 1, "T": 3,
            "A_xe": [1.0, 0.1, 0.0, 1.0],
            "B_ue": [0.005, 0.1],
            "Q": [1.0, 0.0, 0.0, 1.0],
            "U": [1.0],
            "A_xi": [0.0, 0.0, 0.0, 0.0],
            "B_ui": [1.0, -1.0],
            "b_xui": [-0.5, -0.5],
            "x0": [1.0, 0.0]
        }"#;
        let prob = MpcProblem::from_json_str(json).unwrap();
        assert_eq!(prob.horizon, 3);
        assert_eq!(prob.m_i(), 2);
        // Defaults: S, q, r, c zero; Q_f = Q; q_f = q; b_xui_f = b_xui.
        assert_eq!(prob.s_cost.amax(), 0.0);
        assert_eq!(prob.c.amax(), 0.0);
        assert!((prob.qf_cost.clone() - prob.q_cost.clone()).amax() == 0.0);
        assert!((prob.b_xui_f.clone() - prob.b_xui.clone()).amax() == 0.0);

        let text = prob.to_json_string().unwrap();
        let back = MpcProblem::from_json_str(&text).unwrap();
        assert!((back.a_xe - prob.a_xe).amax() == 0.0);
        assert!((back.b_xui_f - prob.b_xui_f).amax() == 0.0);
    }

    #[test]
    fn validation_names_offending_field() {
        let mut prob = identity_problem(2, 2);
        prob.q_cost[(0, 0)] = -1.0;
        match prob.validate() {
            Err(ProblemError::Invalid { field, .. }) => assert_eq!(field, "Q"),
            other => panic!("expected invalid Q, got {other:?}"),
        }

        let mut prob = identity_problem(2, 2);
        prob.x0 = DVector::zeros(3);
        match prob.validate() {
            Err(ProblemError::BadShape { field, .. }) => assert_eq!(field, "x0"),
            other => panic!("expected x0 shape error, got {other:?}"),
        }

        let mut prob = identity_problem(2, 2);
        prob.horizon = 0;
        assert!(prob.validate().is_err());
    }
}
