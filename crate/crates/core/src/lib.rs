//! Terminal ingredients for linear-quadratic MPC via configuration-constrained
//! polytopes.
//!
//! The crate is organised around five pieces:
//!
//! - [`qpcore`]: a single standard-form convex QP/LP contract with one solving
//!   routine and KKT verification. Every optimisation problem in the crate is
//!   compiled down to this form.
//! - [`polytope`]: halfspace/vertex polytope types, the cc-template machinery
//!   (joint facet/vertex representations), polyhedral projection and the
//!   invariant-set algorithms.
//! - [`regulator`]: discrete algebraic Riccati machinery and closed-form
//!   scalar oracles used as analytic ground truth.
//! - [`terminal`]: the control-invariant terminal set `T(beta)`, the
//!   piecewise-quadratic terminal cost `m(x)` and its descent certificates.
//! - [`mpc`]: assembly of the full MPC quadratic program, closed-loop
//!   simulation, the long-horizon reference and the suboptimality metric.

pub mod mpc;
pub mod polytope;
pub mod qpcore;
pub mod regulator;
pub mod terminal;

pub use qpcore::{solve_lp, solve_qp, QpSolution, QpStatus, QuadraticProgram};
