//! Doubly robust semi-supervised (DRSS) estimation of a mean response and of
//! average treatment effects when the labeled fraction is small and the
//! labeling may depend on covariates.
//!
//! The crate provides:
//!
//! - outcome-model estimators (least squares, polynomial, lasso, Gaussian
//!   kernel ridge) in [`linear_models`];
//! - decaying propensity-score estimators (constant, offset logistic MLE and
//!   lasso, stratified labeling) in [`propensity`];
//! - cross-fitted mean estimators with per-observation influence values in
//!   [`estimators`];
//! - plug-in and adjusted variance estimation with normal confidence
//!   intervals in [`inference`];
//! - treatment-effect estimation for extremely imbalanced arms in [`ate`];
//! - data-generating processes and a Monte Carlo harness in [`sim`];
//! - CSV ingestion and report emission in [`io`].

pub mod ate;
pub mod data;
pub mod error;
pub mod estimators;
pub mod inference;
pub mod io;
pub mod linear_models;
pub mod propensity;
pub mod sim;

pub use data::{make_folds, validate_sample, CrossFitPlan, RandomStream, SampleMode, SemiSupervisedSample};
pub use error::{Error, Result};
