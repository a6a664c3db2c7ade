//! Classical and semiparametric Cramér-Rao bounds for real elliptically
//! symmetric (RES) models.
//!
//! The crate estimates every expectation by an empirical mean over one shared
//! Monte Carlo batch, so projections, Schur complements and sieve bounds are
//! exact finite-dimensional linear algebra on that batch:
//!
//! - [`model`]: density generators, the RES density, packed parameters.
//! - [`sampling`]: seeded RES sampling and radial moments.
//! - [`hilbert`]: centered function samples, spans and projections.
//! - [`fisher`]: scores, Fisher information, CRB (Schur and projection routes).
//! - [`semiparam`]: generator tilts, sieve tangent spaces and the SCRB.
//! - [`estimators`]: reference and robust M-estimators and the bound benchmark.

// `!(x <= tol)` is used on purpose so that NaN fails the check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

#![forbid(unsafe_code)]

pub mod error;
pub mod estimators;
pub mod fisher;
pub mod hilbert;
pub mod model;
pub mod numeric;
pub mod quad;
pub mod sampling;
pub mod seed;
pub mod semiparam;

pub use error::{Error, Result};
