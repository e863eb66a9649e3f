//! Chance-constrained DC optimal power flow (CC-OPF) under wind uncertainty.
//!
//! The crate is organized around a pipeline:
//!
//! 1. [`case`] — parse a MATPOWER-style case file and a wind/chance JSON
//!    config into an immutable [`case::GridCase`].
//! 2. [`network`] — build the weighted Laplacian, factor the reduced matrix
//!    and precompute the wind-influence columns ([`network::NetworkFactors`]).
//! 3. [`opf`] — the affine control model `p(ω) = p̄ − α·Σω`, closed-form
//!    flow/generator statistics, expected cost, and the Gaussian
//!    chance-constraint margins.
//! 4. [`cutting_plane`] — the nominal CC-OPF solver: a linearly constrained
//!    convex QP master problem refined by outer-envelope cuts of the conic
//!    variance constraints.
//! 5. [`robust`] — data-robust CC-OPF against budget or ellipsoid
//!    uncertainty in the forecast means and variances.
//! 6. [`validate`] — ground truth: analytic Gaussian overload probabilities
//!    and seeded Monte Carlo under Gaussian and non-Gaussian wind.
//!
//! The [`qp`] module defines the QP-backend contract used by the solvers and
//! provides the reference interior-point implementation.

pub mod case;
pub mod config;
pub mod cutting_plane;
pub mod network;
pub mod opf;
pub mod qp;
pub mod robust;
pub mod validate;
