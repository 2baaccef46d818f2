//! Joint models of repeated measurements and survival time.
//!
//! A longitudinal outcome follows a mixed-effects model
//! `Y(t) = X(t)ᵀβ + X̃(t)ᵀa + ε(t)` and the survival intensity is
//! `λ(t) exp{(φ∘W̃(t))ᵀa + W(t)ᵀγ}`, with a shared normal random effect
//! `a ~ N(0, Σ_a)`. The baseline cumulative hazard `Λ` is estimated
//! nonparametrically as a step function with jumps at the observed event
//! times. This crate provides:
//!
//! - the observed-data log-likelihood and its analytic scores
//!   ([`likelihood`]),
//! - adaptive Gauss–Hermite posterior integration ([`quadrature`]),
//! - the EM/NPMLE fitter with the Breslow-type hazard update ([`em`]),
//! - profile-likelihood information estimates, likelihood-ratio statistics
//!   and Wald intervals ([`profile`]),
//! - a simulator with known truth and replicated Monte Carlo studies
//!   ([`sim`]),
//! - file formats and the command-line front end ([`cli`]).
//!
//! See the `examples/` directory for one runnable program per capability.

pub mod error;
pub mod likelihood;
pub mod model;
pub mod quadrature;

pub use error::{Error, Result};
pub use model::{Dataset, ModelSpec, StepCumHazard, SubjectRecord, ThetaParams};
