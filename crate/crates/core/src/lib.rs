//! Risk-minimization toolkit on finite problems.
//!
//! The crate works with function classes materialized as evaluation tables
//! over a finite-support distribution and an i.i.d. sample from it, so every
//! supremum and infimum is a finite max or min and every "true" risk is an
//! exact weighted sum.
//!
//! * [`core_model`]: true/empirical/excess risks, δ-minimal sets, L2 diameters.
//! * [`local_complexity`]: localized Rademacher averages, the three-term
//!   complexity bound and its fixed point.
//! * [`model_selection`]: penalized selection over nested classes together with
//!   an auditor for the oracle inequality it satisfies.
//! * [`aggregation_bounds`]: the `{0,1}^N` construction showing that selecting
//!   one of `N` functions by empirical risk pays `sqrt(ln N / n)`.
//! * [`sparse_erm`]: penalized ERM over a dictionary with ℓ0/ℓ1/ℓp penalties,
//!   the sparsity function and sparsity/recovery audits.
//! * [`experiment`]: JSON-configured sweeps with deterministic CSV/JSON output.

pub mod aggregation_bounds;
pub mod core_model;
pub mod error;
pub mod experiment;
pub mod local_complexity;
pub mod model_selection;
pub mod rng;
pub mod schema;
pub mod sparse_erm;

pub use error::{Error, Result};
