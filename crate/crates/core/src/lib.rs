//! Off-policy temporal-difference policy evaluation with linear function
//! approximation.
//!
//! The crate bundles the pieces needed to study the backstepping family of
//! gradient TD learners (BTD, the single time-scale TDC variants and the
//! generalized TDC++ with linear or rectifier regularization):
//!
//! * [`numkit`]: small dense linear algebra, eigenvalues and RK4.
//! * [`envs`]: finite MDPs and the five diagnostic environments.
//! * [`tdcore`]: exact expectation matrices, sampling and error metrics.
//! * [`learners`]: the one-step stochastic update rules.
//! * [`odelab`]: closed-loop mean ODEs and their integration.
//! * [`stability`]: hyperparameter conditions, Hurwitz and Lyapunov checks.
//! * [`harness`]: seeded multi-run experiments and sweeps.

// Negated comparisons reject NaN on purpose; index loops mirror the math.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod envs;
pub mod error;
pub mod harness;
pub mod learners;
pub mod numkit;
pub mod odelab;
pub mod stability;
pub mod tdcore;

pub use error::{Error, Result};
pub use numkit::{Matrix, Vector};
