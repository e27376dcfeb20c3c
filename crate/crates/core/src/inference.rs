//! Wald inference on the regression coefficients and mean-response
//! prediction.
//!
//! The covariance treats the fitted effects as known offsets: it inverts the
//! negative Hessian of the offset log likelihood at `beta_hat`. This is the
//! large-sample approximation reported by the fitter; it is labeled as such
//! in the artifact and no bootstrap is attempted.

use nalgebra::{Cholesky, DMatrix};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::estimator::FittedModel;
use crate::math::normal_quantile;
use crate::smoother::SmoothedEffects;

/// Covariance, standard errors, and Wald intervals for `beta`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InferenceResult {
    /// Row-major `p x p` covariance of `beta_hat`.
    pub cov: Vec<f64>,
    pub se: Vec<f64>,
    pub intervals: Vec<(f64, f64)>,
    pub level: f64,
}

/// Inverse of `sum_i (-d2_i) x_i x_i'` evaluated at the fitted predictor
/// with effect offsets; for the gaussian family this is `psi (X'X)^{-1}`.
pub fn covariance_beta(ds: &Dataset, model: &FittedModel) -> Result<DMatrix<f64>> {
    let p = ds.n_covariates();
    if p == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    let fam = ds.family();
    let mut info = DMatrix::<f64>::zeros(p, p);
    for i in 0..ds.n_obs() {
        let eta = model.params.eta(ds, i);
        let d2 = fam
            .d2_raw(ds.response(i), eta, model.params.psi)
            .ok_or_else(|| {
                Error::Estimation(format!(
                    "category probability underflow at observation {} in covariance",
                    i + 1
                ))
            })?;
        let x = ds.xrow(i);
        for a in 0..p {
            for b in 0..=a {
                info[(a, b)] += (-d2) * x[a] * x[b];
            }
        }
    }
    for a in 0..p {
        for b in a + 1..p {
            info[(a, b)] = info[(b, a)];
        }
    }
    let chol = Cholesky::new(info).ok_or(Error::RankDeficient { column: 0 })?;
    let mut cov = chol.inverse();
    // Exact symmetry for downstream consumers.
    for a in 0..p {
        for b in 0..a {
            let m = 0.5 * (cov[(a, b)] + cov[(b, a)]);
            cov[(a, b)] = m;
            cov[(b, a)] = m;
        }
    }
    Ok(cov)
}

/// Wald intervals `beta_k +/- z_{(1+level)/2} se_k`.
pub fn confidence_intervals(
    beta: &[f64],
    cov: &DMatrix<f64>,
    level: f64,
) -> Result<Vec<(f64, f64)>> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Config(format!(
            "confidence level must lie in (0, 1), got {level}"
        )));
    }
    let z = normal_quantile(0.5 * (1.0 + level));
    Ok(beta
        .iter()
        .enumerate()
        .map(|(k, &b)| {
            let se = cov[(k, k)].max(0.0).sqrt();
            (b - z * se, b + z * se)
        })
        .collect())
}

/// Covariance, standard errors, and intervals in one call.
pub fn infer(ds: &Dataset, model: &FittedModel, level: f64) -> Result<InferenceResult> {
    let cov = covariance_beta(ds, model)?;
    let p = ds.n_covariates();
    let se: Vec<f64> = (0..p).map(|k| cov[(k, k)].max(0.0).sqrt()).collect();
    let intervals = confidence_intervals(&model.params.beta, &cov, level)?;
    Ok(InferenceResult {
        cov: cov.as_slice().to_vec(),
        se,
        intervals,
        level,
    })
}

/// A way reference in prediction input: a known 0-based level code or an
/// unseen label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LevelRef {
    Code(usize),
    Unknown(String),
}

/// Rows to predict: a row-major `n x p` covariate block and one level
/// reference per way per row.
#[derive(Debug, Clone)]
pub struct PredictRows {
    pub n: usize,
    pub x: Vec<f64>,
    pub ways: Vec<Vec<LevelRef>>,
}

/// One prediction: the mean response, the rounded category for ordered
/// outcomes (half away from zero, clamped to `1..=K`), and whether any way
/// level was unknown (its effect contribution is zero).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Prediction {
    pub mean: f64,
    pub category: Option<u32>,
    pub new_level: bool,
}

/// Mean-response predictions with point effects, or smoothed effects and the
/// re-estimated coefficients when `smoothed` is given. Unknown levels are an
/// error unless `allow_new` is set, in which case they contribute effect 0
/// (the effects' normalized center) and flag the row.
pub fn predict(
    model: &FittedModel,
    smoothed: Option<&SmoothedEffects>,
    rows: &PredictRows,
    allow_new: bool,
) -> Result<Vec<Prediction>> {
    let p = model.params.beta.len();
    let k_ways = model.params.gamma.len();
    if rows.x.len() != rows.n * p {
        return Err(Error::Prediction(format!(
            "covariate block has {} entries, expected {}",
            rows.x.len(),
            rows.n * p
        )));
    }
    if rows.ways.len() != k_ways {
        return Err(Error::Prediction(format!(
            "{} way columns for a {}-way model",
            rows.ways.len(),
            k_ways
        )));
    }
    let beta: &[f64] = match smoothed {
        Some(s) if !s.beta_smoothed.is_empty() || p == 0 => &s.beta_smoothed,
        Some(_) => {
            return Err(Error::Prediction(
                "smoothed effects lack re-estimated coefficients".into(),
            ))
        }
        None => &model.params.beta,
    };
    let k_cat = model.family.n_categories();
    let mut out = Vec::with_capacity(rows.n);
    for r in 0..rows.n {
        let mut eta: f64 = rows.x[r * p..(r + 1) * p]
            .iter()
            .zip(beta)
            .map(|(x, b)| x * b)
            .sum();
        let mut new_level = false;
        for k in 0..k_ways {
            match &rows.ways[k][r] {
                LevelRef::Code(l) => {
                    if *l >= model.params.gamma[k].len() {
                        return Err(Error::Prediction(format!(
                            "level code {} out of range for way {}",
                            l + 1,
                            k + 1
                        )));
                    }
                    eta += match smoothed {
                        Some(s) => s.effects[k][*l],
                        None => model.params.alpha[k][model.params.gamma[k][*l]],
                    };
                }
                LevelRef::Unknown(label) => {
                    if !allow_new {
                        return Err(Error::Prediction(format!(
                            "unknown level '{label}' in way {} at row {}",
                            k + 1,
                            r + 1
                        )));
                    }
                    new_level = true;
                }
            }
        }
        let mean = model.family.mean_response(eta);
        let category = k_cat.map(|k| (mean.round().max(1.0) as u32).min(k as u32));
        out.push(Prediction {
            mean,
            category,
            new_level,
        });
    }
    Ok(out)
}

/// Finite-difference check target: the offset log likelihood whose Hessian
/// the covariance inverts (test support; exposed for the acceptance suite).
pub fn offset_loglik_in_beta(ds: &Dataset, model: &FittedModel, beta: &[f64]) -> f64 {
    let mut ll = 0.0;
    for i in 0..ds.n_obs() {
        let mut eta: f64 = ds.xrow(i).iter().zip(beta).map(|(x, b)| x * b).sum();
        for k in 0..model.params.alpha.len() {
            eta += model.params.alpha[k][model.params.gamma[k][ds.way_code(k, i)]];
        }
        ll += ds
            .family()
            .log_density_raw(ds.response(i), eta, model.params.psi);
    }
    ll
}
