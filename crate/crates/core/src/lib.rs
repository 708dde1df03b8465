//! Collision-constrained pose and trajectory optimization with separating
//! planes and log-free inverse barriers.
//!
//! Three solvers share one problem description:
//! [`ecb::ecb_solve`] (joint Newton on configuration and planes),
//! [`icb::icb_solve`] (planes as implicit functions of the configuration) and
//! [`ao::ao_solve`] (alternating plane solves and configuration steps).

// `!(x > 0.0)` deliberately rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod ao;
pub mod barrier;
pub mod bench;
pub mod ecb;
pub mod error;
pub mod geometry;
pub mod icb;
pub mod kinematics;
pub mod problem;
pub mod scenario;
pub mod solver;

pub use error::{Error, Result};
pub use solver::{SolveResult, SolveTrace, SolverSettings, TerminationReason};
