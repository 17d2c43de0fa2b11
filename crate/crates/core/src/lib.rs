//! Group-wise marginal treatment effects when the population is a finite
//! mixture of latent groups, each with its own continuous instrument.
//!
//! The pipeline has two steps. [`mixture::em_fit`] estimates a
//! finite-mixture Probit for treatment choice; [`series::fit_outcome_stage`]
//! regresses `D*Y` and `(1-D)*Y` on stacked B-spline regressors in the
//! fitted propensities. Group-wise MTE curves follow by differentiating the
//! spline parts, with plug-in sandwich standard errors from [`inference`]
//! and CATE/ATE/PRTE/LATE summaries from [`aggregates`]. [`dgp`] and [`mc`]
//! provide the simulation design and a Monte Carlo harness; [`cli`] wires
//! everything to config files.

pub mod aggregates;
pub mod cli;
pub mod data;
pub mod dgp;
pub mod error;
pub mod inference;
pub mod mc;
pub mod mixture;
pub mod numeric;
pub mod series;

pub use error::{Error, Result};
