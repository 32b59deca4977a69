//! Structured interior-point QP solver for linear model-predictive control.
//!
//! The receding-horizon QP is kept in its block form throughout: the equality
//! constraints (the dynamics) are eliminated with a sparse null-space basis
//! built from an invertible, virtually-augmented transfer matrix, so each
//! Newton iteration of the primal-dual IPM needs a single block-tridiagonal
//! Cholesky factorization. A classical normal-equations solver (two
//! factorizations per iteration) is included as a reference, together with a
//! dense Newton-KKT oracle for small instances and a benchmark harness.
//!
//! Modules:
//! - [`problem`]: problem data and block QP assembly
//! - [`blockla`]: symmetric block-tridiagonal matrices, block Cholesky
//! - [`augment`]: virtual controls, QR of the augmented transfer matrix
//! - [`nullspace`]: the sparse null-space basis and offline projections
//! - [`eqinit`]: structured QR of the dynamics matrix, initial feasible point
//! - [`ipm`]: the predictor-corrector interior-point loop
//! - [`reference`]: classical normal-equations solver and dense KKT oracle
//! - [`bench`]: problem generators, closed-loop simulation, timing sweeps

pub mod augment;
pub mod bench;
pub mod blockla;
pub mod eqinit;
pub mod ipm;
pub mod nullspace;
pub mod problem;
pub mod reference;

pub use augment::Augmentation;
pub use blockla::{BlockCholFactor, BlockTriDiagSym};
pub use eqinit::StructuredQrAe;
pub use ipm::{NullspaceSolver, SolveResult, SolverOptions, SolverStatus};
pub use nullspace::{NullBasis, Projections};
pub use problem::{MpcProblem, StructuredQp};
pub use reference::ClassicalSolver;
