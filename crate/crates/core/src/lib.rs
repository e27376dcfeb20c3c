//! Crossed grouped-effects (CGE) regression models.
//!
//! A CGE model explains a response observed on K crossed classification
//! "ways" (e.g. user × movie) through a linear predictor
//! `eta_i = x_i' beta + a_{1,g(z_1i)} + ... + a_{K,g(z_Ki)}`, where each
//! way's additive effects take only `G_k` distinct values and the mapping
//! from levels to those values is estimated together with everything else.
//! Estimation maximizes a penalized mean log likelihood by blockwise
//! coordinate ascent; the penalty pins adjacent ways' mean effects together
//! and only normalizes locations, so the fit is insensitive to its weight.
//!
//! The crate provides:
//!
//! - [`family`]: outcome families (gaussian, logistic, Poisson, ordered
//!   probit) with log densities and first/second derivatives in `eta`;
//! - [`data`]: CSV ingestion and validation of cross-classified datasets;
//! - [`estimator`]: the coordinate-ascent fitter, its individual block
//!   updates, and the ordered-probit null fit used to fix thresholds;
//! - [`smoother`]: pseudo-posterior group probabilities and smoothed
//!   per-level effects, with re-estimation of the regression coefficients;
//! - [`inference`]: Wald covariance/intervals for `beta` and mean-response
//!   prediction;
//! - [`sim`]: data generators and a replication harness computing MSE,
//!   coverage, and ordered-prediction metrics;
//! - [`artifact`]: the versioned JSON model artifact shared with the CLI.
//!
//! ```no_run
//! use cge_core::{build_level_index, fit, infer, smooth, CsvSchema, Dataset, Family, FitConfig};
//!
//! # fn run() -> Result<(), cge_core::Error> {
//! let schema = CsvSchema {
//!     response: "y".into(),
//!     covariates: vec!["x1".into()],
//!     ways: vec!["user".into(), "item".into()],
//! };
//! let ds = Dataset::load_csv("data.csv", &schema, Family::BernoulliLogit)?;
//! let model = fit(&ds, &FitConfig::default())?;
//! let inference = infer(&ds, &model, 0.95)?;
//! let smoothed = smooth(&model, &ds, &build_level_index(&ds))?;
//! println!("beta = {:?} ({:?})", model.params.beta, inference.intervals);
//! println!("smoothed beta = {:?}", smoothed.beta_smoothed);
//! # Ok(())
//! # }
//! ```

pub mod artifact;
pub mod data;
pub mod error;
pub mod estimator;
pub mod family;
pub mod inference;
pub mod math;
pub mod sim;
pub mod smoother;

pub use data::{build_level_index, CsvSchema, Dataset, LevelIndex};
pub use error::{Error, Result};
pub use estimator::{
    fit, fit_ordered_null, fit_warm, objective, penalty, recover_intercept, update_assignments,
    update_group_effect, update_regression, FitConfig, FitWarnings, FittedModel, GroupRule, Init,
    ModelParams,
};
pub use family::Family;
pub use inference::{
    confidence_intervals, covariance_beta, infer, predict, InferenceResult, LevelRef, Prediction,
    PredictRows,
};
pub use smoother::{pseudo_posterior, reestimate_beta, smooth, smooth_effects, SmoothedEffects};
