//! Browser demo bindings. Three interactive operations, each returning a
//! JSON payload for the static page in `www/`:
//!
//! - [`demo_fit_two_way`]: simulate a two-way logistic dataset, fit it, and
//!   smooth it — true vs. fitted per-level effects, the pseudo-posterior
//!   matrix, the coefficient table, and the objective trace;
//! - [`demo_ordered_curves`]: ordered-probit category probabilities and the
//!   predictive mean as functions of the linear predictor;
//! - [`demo_lambda_path`]: refits across a grid of penalty weights, showing
//!   that the estimates are insensitive to `lambda` while the way-mean gap
//!   stays pinned at zero.
//!
//! Build with `wasm-pack build crates/demo --target web` and serve `www/`.

use serde::Serialize;
use wasm_bindgen::prelude::wasm_bindgen;

use cge_core::family::ordered_category_probs;
use cge_core::sim::{gen_two_way_logistic, Scenario};
use cge_core::{
    build_level_index, fit, penalty, recover_intercept, smooth, Family, FitConfig, GroupRule,
};

#[derive(Serialize)]
struct FitDemo {
    n_obs: usize,
    levels: Vec<usize>,
    groups: Vec<usize>,
    converged: bool,
    sweeps: usize,
    objective_trace: Vec<f64>,
    beta_true: Vec<f64>,
    beta_hat: Vec<f64>,
    beta_smoothed: Vec<f64>,
    intercept_true: f64,
    intercept_hat: f64,
    /// Per way: true effect of each level.
    true_effects: Vec<Vec<f64>>,
    /// Per way: fitted point effect of each level (support at assignment).
    fitted_effects: Vec<Vec<f64>>,
    /// Per way: smoothed effect of each level.
    smoothed_effects: Vec<Vec<f64>>,
    /// Pseudo-posterior matrix of the first way.
    pi_way1: Vec<Vec<f64>>,
    /// Support values of the first way.
    alpha_way1: Vec<f64>,
}

fn fit_two_way_payload(
    n_obs: usize,
    groups_per_way: usize,
    lambda: f64,
    seed: u64,
    skewed: bool,
) -> Result<FitDemo, cge_core::Error> {
    let scenario = if skewed { Scenario::S2 } else { Scenario::S1 };
    let (ds, truth) = gen_two_way_logistic(n_obs, scenario, seed);
    let cfg = FitConfig {
        groups: if groups_per_way == 0 {
            GroupRule::Auto
        } else {
            GroupRule::Counts(vec![groups_per_way; 2])
        },
        lambda,
        seed,
        ..FitConfig::default()
    };
    let model = fit(&ds, &cfg)?;
    let idx = build_level_index(&ds);
    let smoothed = smooth(&model, &ds, &idx)?;
    let fitted_effects: Vec<Vec<f64>> = (0..2)
        .map(|k| {
            model.params.gamma[k]
                .iter()
                .map(|&g| model.params.alpha[k][g])
                .collect()
        })
        .collect();
    Ok(FitDemo {
        n_obs: ds.n_obs(),
        levels: ds.level_counts().to_vec(),
        groups: model.group_counts.clone(),
        converged: model.converged,
        sweeps: model.sweeps,
        objective_trace: model.objective_trace.clone(),
        beta_true: truth.beta.clone(),
        beta_hat: model.params.beta.clone(),
        beta_smoothed: smoothed.beta_smoothed.clone(),
        intercept_true: truth.intercept,
        intercept_hat: recover_intercept(&model.params, &ds),
        true_effects: truth.effects.clone(),
        fitted_effects,
        smoothed_effects: smoothed.effects.clone(),
        pi_way1: smoothed.pi[0].clone(),
        alpha_way1: model.params.alpha[0].clone(),
    })
}

fn to_json(result: Result<impl Serialize, cge_core::Error>) -> String {
    match result {
        Ok(payload) => serde_json::to_string(&payload).unwrap_or_else(|e| error_json(&e.to_string())),
        Err(e) => error_json(&e.to_string()),
    }
}

fn error_json(msg: &str) -> String {
    serde_json::json!({ "error": msg }).to_string()
}

/// Simulate a two-way logistic dataset at desk scale, fit and smooth it.
/// `groups_per_way = 0` selects the square-root rule; `skewed` switches the
/// effect distributions from normals to centered exponentials.
#[wasm_bindgen]
pub fn demo_fit_two_way(
    n_obs: usize,
    groups_per_way: usize,
    lambda: f64,
    seed: u64,
    skewed: bool,
) -> String {
    if !(25..=100_000).contains(&n_obs) {
        return error_json("n_obs must lie in [25, 100000]");
    }
    if !(lambda > 0.0) {
        return error_json("lambda must be positive");
    }
    to_json(fit_two_way_payload(n_obs, groups_per_way, lambda, seed, skewed))
}

#[derive(Serialize)]
struct OrderedCurves {
    eta: Vec<f64>,
    /// One row per grid point, `K` category probabilities each.
    probs: Vec<Vec<f64>>,
    mean: Vec<f64>,
    thresholds: Vec<f64>,
}

/// Ordered-probit category probability curves over a grid of linear
/// predictors. `thresholds_csv` is a comma list such as "-1.5,-0.5,0.5,1.5".
#[wasm_bindgen]
pub fn demo_ordered_curves(thresholds_csv: &str, eta_min: f64, eta_max: f64, points: usize) -> String {
    let thresholds: Result<Vec<f64>, _> = thresholds_csv
        .split(',')
        .map(|t| t.trim().parse::<f64>())
        .collect();
    let thresholds = match thresholds {
        Ok(t) => t,
        Err(_) => return error_json("thresholds must be a comma list of numbers"),
    };
    if let Err(e) = Family::ordered_probit(thresholds.clone()) {
        return error_json(&e.to_string());
    }
    if points < 2 || points > 5000 || !(eta_min < eta_max) {
        return error_json("need 2..=5000 points and eta_min < eta_max");
    }
    let eta: Vec<f64> = (0..points)
        .map(|i| eta_min + (eta_max - eta_min) * i as f64 / (points - 1) as f64)
        .collect();
    let probs: Vec<Vec<f64>> = eta.iter().map(|&e| ordered_category_probs(&thresholds, e)).collect();
    let mean: Vec<f64> = probs
        .iter()
        .map(|row| row.iter().enumerate().map(|(j, p)| (j + 1) as f64 * p).sum())
        .collect();
    to_json(Ok(OrderedCurves { eta, probs, mean, thresholds }))
}

#[derive(Serialize)]
struct LambdaPathPoint {
    lambda: f64,
    beta_hat: Vec<f64>,
    way_mean_gap: f64,
    penalty: f64,
    objective: f64,
}

/// Fit the same simulated dataset across a grid of penalty weights. The
/// penalty only normalizes effect locations, so the coefficient estimates
/// barely move and the way-mean gap stays at zero.
#[wasm_bindgen]
pub fn demo_lambda_path(n_obs: usize, seed: u64, lambdas_csv: &str) -> String {
    if !(25..=20_000).contains(&n_obs) {
        return error_json("n_obs must lie in [25, 20000]");
    }
    let lambdas: Result<Vec<f64>, _> =
        lambdas_csv.split(',').map(|t| t.trim().parse::<f64>()).collect();
    let lambdas = match lambdas {
        Ok(l) if !l.is_empty() && l.iter().all(|&v| v > 0.0) => l,
        _ => return error_json("lambdas must be a comma list of positive numbers"),
    };
    let (ds, _) = gen_two_way_logistic(n_obs, Scenario::S1, seed);
    let run = || -> Result<Vec<LambdaPathPoint>, cge_core::Error> {
        lambdas
            .iter()
            .map(|&lambda| {
                let cfg = FitConfig { lambda, seed, ..FitConfig::default() };
                let model = fit(&ds, &cfg)?;
                let gap = (0..ds.n_ways() - 1)
                    .map(|k| (model.params.way_mean(k) - model.params.way_mean(k + 1)).abs())
                    .fold(0.0, f64::max);
                Ok(LambdaPathPoint {
                    lambda,
                    beta_hat: model.params.beta.clone(),
                    way_mean_gap: gap,
                    penalty: penalty(&model.params.alpha, &model.params.gamma, lambda, &ds),
                    objective: model.final_objective(),
                })
            })
            .collect()
    };
    to_json(run())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fit_demo_payload_is_consistent() {
        let json = demo_fit_two_way(900, 3, 100.0, 5, false);
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert!(v.get("error").is_none(), "{json}");
        assert_eq!(v["beta_true"].as_array().unwrap().len(), 5);
        assert_eq!(
            v["true_effects"][0].as_array().unwrap().len(),
            v["fitted_effects"][0].as_array().unwrap().len()
        );
        let trace = v["objective_trace"].as_array().unwrap();
        for w in trace.windows(2) {
            assert!(w[1].as_f64().unwrap() >= w[0].as_f64().unwrap() - 1e-10);
        }
        for row in v["pi_way1"].as_array().unwrap() {
            let s: f64 = row.as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn ordered_curves_are_stochastic_and_monotone_in_mean() {
        let json = demo_ordered_curves("-1.5,-0.5,0.5,1.5", -4.0, 4.0, 81);
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert!(v.get("error").is_none(), "{json}");
        let probs = v["probs"].as_array().unwrap();
        for row in probs {
            let s: f64 = row.as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        let mean: Vec<f64> = v["mean"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
        for w in mean.windows(2) {
            assert!(w[1] >= w[0] - 1e-12, "predictive mean not monotone");
        }
    }

    #[test]
    fn lambda_path_shows_insensitivity() {
        let json = demo_lambda_path(900, 3, "10,100,1000");
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        let points = v.as_array().unwrap();
        assert_eq!(points.len(), 3);
        let b0: Vec<f64> = points[0]["beta_hat"]
            .as_array()
            .unwrap()
            .iter()
            .map(|x| x.as_f64().unwrap())
            .collect();
        let b2: Vec<f64> = points[2]["beta_hat"]
            .as_array()
            .unwrap()
            .iter()
            .map(|x| x.as_f64().unwrap())
            .collect();
        let drift = b0.iter().zip(&b2).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(drift < 0.05, "beta drifts {drift} across the lambda grid");
        for p in points {
            assert!(p["way_mean_gap"].as_f64().unwrap() < 1e-8);
        }
    }

    #[test]
    fn invalid_inputs_return_error_payloads() {
        for json in [
            demo_fit_two_way(5, 2, 100.0, 1, false),
            demo_ordered_curves("1,0", -1.0, 1.0, 10),
            demo_lambda_path(900, 1, "0,-3"),
        ] {
            let v: serde_json::Value = serde_json::from_str(&json).unwrap();
            assert!(v.get("error").is_some(), "{json}");
        }
    }
}
