//! Generalized stochastic ADMM (G-sADMM), its stochastic modified equation,
//! and Monte Carlo tooling to compare the two.
//!
//! - [`problem`]: losses, regularizers, presets, gradient-noise covariance.
//! - [`solver`]: the G-sADMM iteration with residual diagnostics.
//! - [`sme`]: `M̂`, Euler–Maruyama paths, the gradient-flow reference.
//! - [`ensemble`]: deterministic parallel ensembles, weak error, scaling fits.
//! - [`schedules`]: step-size, batch and `M̂` schedules.
//! - [`experiment`]: configs, figure presets, CSV/JSON output, manifests.
//!
//! The guide under `book/` walks through each piece; its code blocks run as
//! doctests of this crate.

// `!(x > 0.0)` also rejects NaN, which is the point.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod ensemble;
pub mod error;
pub mod experiment;
pub mod linalg;
pub mod observable;
pub mod problem;
pub mod rng;
pub mod schedules;
pub mod sme;
pub mod solver;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/problems.md")]
    mod problems {}
    #[doc = include_str!("../../../book/src/solver.md")]
    mod solver {}
    #[doc = include_str!("../../../book/src/sme.md")]
    mod sme {}
    #[doc = include_str!("../../../book/src/ensembles.md")]
    mod ensembles {}
    #[doc = include_str!("../../../book/src/schedules.md")]
    mod schedules {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
}
