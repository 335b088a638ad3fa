//! Solver and verification suite for density-constrained variational mean
//! field games with quadratic Hamiltonian.
//!
//! The primal object is a time-discretized action over density trajectories
//! `rho_0, ..., rho_N` on a box grid: squared Wasserstein steps plus running
//! and terminal potential/entropy terms, minimized under the hard capacity
//! constraint `rho <= 1`. Slice optimality conditions produce an interior
//! pressure and a terminal pressure supported on the saturated set; a
//! backward Hopf-Lax recursion rebuilds the dual value function, whose
//! pairing with the pressures certifies the computed action from below.
//!
//! Module map:
//! - [`grid`]: domains, fields, calculus, CSV interchange.
//! - [`transport`]: entropic Kantorovich potentials, inf-convolutions, an
//!   exact small-instance oracle.
//! - [`slice`]: single-time-slice minimization and pressure extraction.
//! - [`scheme`]: the discrete action and its Gauss-Seidel minimizer.
//! - [`value`]: dual value function, jump measures, duality and
//!   Hamilton-Jacobi residuals.
//! - [`diagnostics`]: estimate checks, studies, machine-readable reports.

pub mod diagnostics;
pub mod grid;
pub mod scalar;
pub mod scheme;
pub mod slice;
pub mod transport;
pub mod value;

pub use scalar::Scalar;

/// Concrete `f64` aliases; the shipped CLI and the file formats use these.
pub type Domain64 = grid::Domain<f64>;
pub type Field64 = grid::GridField<f64>;
pub type PotentialPair64 = transport::PotentialPair<f64>;
pub type SliceSolution64 = slice::SliceSolution<f64>;
pub type Trajectory64 = scheme::Trajectory<f64>;
pub type SchemeSolution64 = scheme::SchemeSolution<f64>;
pub type ValueFunction64 = value::ValueFunction<f64>;
