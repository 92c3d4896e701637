//! Density, quantile and Value-at-Risk estimation from grouped data.
//!
//! Input is a set of consecutive classes with observed frequencies and,
//! optionally, per-class sample central moments up to order four. The
//! density is modelled on a fine latent grid through a softmax of cubic
//! B-splines with a discrete roughness penalty, fitted by EM with
//! Newton-Raphson M-steps. Quantiles and their credible intervals follow
//! from the fitted continuous density and the observed-data information
//! matrix.
//!
//! Typical flow: build a [`fit::GroupedDataset`], call [`fit::fit`], then
//! query [`risk::FittedDensity`] and [`risk::value_at_risk`]. The
//! [`sim`] module houses the replication study used to validate coverage,
//! and [`diagnostics`] the finite-difference and invariant self-checks.

pub mod basis;
pub mod diagnostics;
pub mod error;
pub mod eval;
pub mod fit;
pub mod grid;
pub mod model;
pub mod penalty;
pub mod risk;
pub mod sim;

pub use error::{Error, Result};

// The public API is expressed in nalgebra types; re-export the crate so
// downstream users stay version-aligned.
pub use nalgebra;
