//! Finite-difference solver for the exponential crystal-surface relaxation model
//!
//! ```text
//! -Lap rho + tau ln rho + a u = f
//! -div(grad_z E_tau(grad u)) + tau u = ln rho
//! grad u . nu = grad rho . nu = 0
//! ```
//!
//! with surface energy `E(z) = |z|^p / p + beta0 |z|`, its `tau`-regularization,
//! continuation toward the `tau -> 0` limit, backward Euler time stepping of the
//! relaxation law `u_t = Lap exp(-div dE(grad u))`, and numerical audits of
//! the a priori bounds and of the vanishing order of `rho`.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod analysis;
pub mod cli;
pub mod coupled;
pub mod energy;
pub mod error;
pub mod linalg;
pub mod mesh;
pub mod solvers;

pub use coupled::{PicardConfig, ProblemData, WeakSolutionTriple};
pub use energy::ModelParams;
pub use error::{Error, Result};
pub use mesh::{EdgeField, Grid, NodeField};
pub use solvers::{NewtonConfig, SolveReport};
