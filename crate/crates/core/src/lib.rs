//! Numerical workbench for monotone-follower (singular control) problems on
//! finite scenario trees.
//!
//! * [`lattice`]: time grids, scenario trees, adapted processes and
//!   conditional expectations.
//! * [`cost`]: cost specifications, control plans, expected cost and the
//!   subgradient process.
//! * [`solver`]: capped and uncapped projected-gradient solvers and the cap
//!   ladder.
//! * [`pontryagin`]: the adjoint process and optimality certificates.
//! * [`stopping`]: the equivalent optimal-stopping problem.
//! * [`pseudopath`]: pseudopath distances, conditional variation and marginal
//!   comparisons.
//! * [`admissibility`]: randomized controls, optional projection and
//!   couplings.
//! * [`brute_force`]: dynamic-programming grid search for scalar controls.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod admissibility;
pub mod brute_force;
pub mod cost;
pub mod error;
pub mod export;
pub mod lattice;
pub mod pontryagin;
pub mod pseudopath;
pub mod solver;
pub mod stopping;

pub use cost::{expected_cost, pathwise_cost, ControlPlan, CostMeta, CostSpec, Direction, Penalty, Price};
pub use error::{Error, Result};
pub use lattice::{AdaptedProcess, PathSample, ScenarioTree, TimeGrid};
pub use pontryagin::{certify, compute_adjoint, AdjointProcess, FbsdeCertificate};
pub use solver::{run_ladder, solve_capped, solve_uncapped, LadderReport, SolveOptions, SolveReport};
