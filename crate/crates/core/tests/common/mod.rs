//! Shared fixtures and independent dense oracles for the integration tests.
//!
//! The dense assembler here is written directly from the problem data,
//! independent of the block-structured assembly it checks.
#![allow(dead_code)] // each test target uses a different subset

use nalgebra::{DMatrix, DVector};
use nsmpc_core::augment::Augmentation;
use nsmpc_core::bench::bound_constraints;
use nsmpc_core::problem::{MpcProblem, StructuredQp};

/// Double integrator with box bounds; the classic desk fixture.
pub fn double_integrator(t: usize, x0: [f64; 2]) -> MpcProblem {
    let (a_xi, b_ui, b_xui) = bound_constraints(2, 1, 4.0, 0.5);
    MpcProblem {
        a_xe: DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0]),
        b_ue: DMatrix::from_row_slice(2, 1, &[0.005, 0.1]),
        q_cost: DMatrix::identity(2, 2),
        u_cost: DMatrix::identity(1, 1),
        s_cost: DMatrix::zeros(2, 1),
        q_lin: DVector::zeros(2),
        r_lin: DVector::zeros(1),
        qf_cost: DMatrix::identity(2, 2),
        qf_lin: DVector::zeros(2),
        a_xi,
        b_ui,
        b_xui: b_xui.clone(),
        b_xui_f: b_xui,
        c: DVector::zeros(2),
        horizon: t,
        x0: DVector::from_row_slice(&x0),
    }
}

/// Identity plant with near-inactive bounds (at +-1e6): the
/// equality-constrained analog of an unconstrained problem.
pub fn unconstrained_analog(n_x: usize, t: usize, x0_fill: f64) -> MpcProblem {
    let (a_xi, b_ui, b_xui) = bound_constraints(n_x, n_x, 1e6, 1e6);
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
        a_xi,
        b_ui,
        b_xui: b_xui.clone(),
        b_xui_f: b_xui,
        c: DVector::zeros(n_x),
        horizon: t,
        x0: DVector::from_element(n_x, x0_fill),
    }
}

/// Dense `(H, g, A_e, b_e, A_i, b_i)` assembled straightforwardly from the
/// problem data over the augmented variable ordering
/// `[u_hat(0), x(1), u_hat(1), ..., x(T)]`.
pub struct DenseQp {
    pub h: DMatrix<f64>,
    pub g: DVector<f64>,
    pub a_e: DMatrix<f64>,
    pub b_e: DVector<f64>,
    pub a_i: DMatrix<f64>,
    pub b_i: DVector<f64>,
}

pub fn dense_assemble(prob: &MpcProblem, aug: &Augmentation) -> DenseQp {
    let n_x = prob.n_x();
    let n_u = prob.n_u();
    let n_c = n_x; // augmented control width
    let nv = aug.n_virtual();
    let t = prob.horizon;
    let m_i = prob.m_i();
    let m_stage = m_i + 2 * nv;
    let n = t * (n_c + n_x);

    let u_off = |tau: usize| tau * (n_c + n_x);
    let x_off = |tau: usize| (tau - 1) * (n_c + n_x) + n_c;

    // Augmented cost pieces.
    let mut u_hat = DMatrix::zeros(n_c, n_c);
    u_hat
        .view_mut((0, 0), (n_u, n_u))
        .copy_from(&prob.u_cost);
    for k in n_u..n_c {
        u_hat[(k, k)] = 1.0;
    }
    let mut s_hat = DMatrix::zeros(n_x, n_c);
    s_hat.view_mut((0, 0), (n_x, n_u)).copy_from(&prob.s_cost);
    let mut r_hat = DVector::zeros(n_c);
    r_hat.rows_mut(0, n_u).copy_from(&prob.r_lin);

    let mut h = DMatrix::zeros(n, n);
    let mut g = DVector::zeros(n);
    h.view_mut((0, 0), (n_c, n_c)).copy_from(&u_hat);
    g.rows_mut(0, n_c)
        .copy_from(&(&r_hat + 2.0 * s_hat.transpose() * &prob.x0));
    for tau in 1..t {
        h.view_mut((x_off(tau), x_off(tau)), (n_x, n_x))
            .copy_from(&prob.q_cost);
        h.view_mut((x_off(tau), u_off(tau)), (n_x, n_c))
            .copy_from(&s_hat);
        h.view_mut((u_off(tau), x_off(tau)), (n_c, n_x))
            .copy_from(&s_hat.transpose());
        h.view_mut((u_off(tau), u_off(tau)), (n_c, n_c))
            .copy_from(&u_hat);
        g.rows_mut(x_off(tau), n_x).copy_from(&prob.q_lin);
        g.rows_mut(u_off(tau), n_c).copy_from(&r_hat);
    }
    h.view_mut((x_off(t), x_off(t)), (n_x, n_x))
        .copy_from(&prob.qf_cost);
    g.rows_mut(x_off(t), n_x).copy_from(&prob.qf_lin);

    // Equality rows.
    let mut a_e = DMatrix::zeros(t * n_x, n);
    let mut b_e = DVector::zeros(t * n_x);
    for tau in 0..t {
        let r = tau * n_x;
        a_e.view_mut((r, u_off(tau)), (n_x, n_c))
            .copy_from(&(-aug.b_hat()));
        if tau > 0 {
            a_e.view_mut((r, x_off(tau)), (n_x, n_x))
                .copy_from(&(-&prob.a_xe));
        }
        a_e.view_mut((r, x_off(tau + 1)), (n_x, n_x))
            .copy_from(&DMatrix::identity(n_x, n_x));
        if tau == 0 {
            b_e.rows_mut(0, n_x)
                .copy_from(&(&prob.a_xe * &prob.x0 + &prob.c));
        } else {
            b_e.rows_mut(r, n_x).copy_from(&prob.c);
        }
    }

    // Inequality rows: T stage blocks (with paired virtual rows) plus the
    // terminal block.
    let m_total = t * m_stage + m_i;
    let mut a_i = DMatrix::zeros(m_total, n);
    let mut b_i = DVector::zeros(m_total);
    for tau in 0..t {
        let r = tau * m_stage;
        if tau > 0 {
            a_i.view_mut((r, x_off(tau)), (m_i, n_x))
                .copy_from(&prob.a_xi);
        }
        a_i.view_mut((r, u_off(tau)), (m_i, n_u))
            .copy_from(&prob.b_ui);
        for k in 0..nv {
            a_i[(r + m_i + k, u_off(tau) + n_u + k)] = -1.0;
            a_i[(r + m_i + nv + k, u_off(tau) + n_u + k)] = 1.0;
        }
        if tau == 0 {
            b_i.rows_mut(0, m_i)
                .copy_from(&(&prob.b_xui - &prob.a_xi * &prob.x0));
        } else {
            b_i.rows_mut(r, m_i).copy_from(&prob.b_xui);
        }
    }
    a_i.view_mut((t * m_stage, x_off(t)), (m_i, n_x))
        .copy_from(&prob.a_xi);
    b_i.rows_mut(t * m_stage, m_i).copy_from(&prob.b_xui_f);

    DenseQp {
        h,
        g,
        a_e,
        b_e,
        a_i,
        b_i,
    }
}

/// Shared `(u(0..T-1), x(1..T))` trajectory of a primal iterate,
/// virtual entries dropped; comparable across the augmented and original
/// formulations.
pub fn shared_trajectory(qp: &StructuredQp, y: &DVector<f64>) -> DVector<f64> {
    let t = qp.horizon();
    let n_u = qp.n_u();
    let n_x = qp.n_x();
    let mut out = DVector::zeros(t * (n_u + n_x));
    let mut at = 0;
    for tau in 0..t {
        out.rows_mut(at, n_u)
            .copy_from(&y.rows(qp.control_offset(tau), n_u));
        at += n_u;
        out.rows_mut(at, n_x)
            .copy_from(&y.rows(qp.state_offset(tau + 1), n_x));
        at += n_x;
    }
    out
}
