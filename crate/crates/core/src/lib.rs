//! Simulation and solver engine for mean-field SDEs driven by G-Brownian
//! motion (Brownian motion with volatility uncertainty).
//!
//! The engine represents the sublinear (upper) expectation
//! `E[xi] = sup_P E_P[xi]` by a finite family of volatility scenarios:
//! a convex uncertainty set of symmetric PSD matrices is discretized into
//! generators, piecewise-constant generator-valued controls are laid on a
//! time grid, and each control induces one controlled Wiener measure.
//! Monte-Carlo path ensembles indexed by (scenario, path[, time]) stand in
//! for random variables and step processes; the upper expectation becomes
//! a max over scenarios of path-means.
//!
//! Modules:
//! - [`uncertainty`]: volatility sets, their discretization, control lattices.
//! - [`sampler`]: path simulation with analytic quadratic covariation.
//! - [`calculus`]: sublinear expectation, norms, stochastic integrals, and
//!   the moment-bound inequalities as runtime checks.
//! - [`coefficients`]: mean-field coefficient triples (b, h, g) with Osgood
//!   regularity data, distribution lifting, and the d1 metric estimator.
//! - [`solver`]: the Phi operator, Picard fixed-point iteration, a-priori
//!   envelope, and uniqueness diagnostics.
//! - [`oracles`]: independent cross-checks (classical McKean-Vlasov particle
//!   solver, 1-D G-heat finite differences).
//! - [`cli`]: config-driven experiment runner behind the `gsde` binary.

pub mod calculus;
pub mod cli;
pub mod coefficients;
pub mod error;
pub mod oracles;
pub mod sampler;
pub mod solver;
pub mod uncertainty;

pub use error::{EngineError, Result};
