//! Post-hoc smoothing: pseudo-posterior group probabilities per level,
//! probability-weighted effect estimates, and re-estimation of the
//! regression coefficients with the smoothed effects as offsets.
//!
//! Products of densities are accumulated as sums of logs and normalized by
//! max-subtracted exponentiation; raw products underflow once a level has
//! more than a few hundred member observations.

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, LevelIndex};
use crate::error::{Error, Result};
use crate::estimator::FittedModel;
use crate::family::Family;

/// Pseudo-posterior probabilities, smoothed per-level effects, and the
/// re-estimated regression block.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SmoothedEffects {
    /// Per way: `n_k x G_k` row-stochastic probability matrix.
    pub pi: Vec<Vec<Vec<f64>>>,
    /// Per way: smoothed effect of each level, a convex combination of that
    /// way's support values.
    pub effects: Vec<Vec<f64>>,
    /// Coefficients re-estimated with smoothed effects as offsets; empty
    /// until [`reestimate_beta`] runs.
    pub beta_smoothed: Vec<f64>,
    /// Dispersion re-estimated alongside `beta` (gaussian only; 1 otherwise).
    pub psi_smoothed: f64,
}

/// Pseudo-posterior probability matrix of one way: row `l` holds the
/// normalized likelihood weights of level `l` belonging to each group, with
/// the fitted point effects of the other ways plugged in as offsets.
pub fn pseudo_posterior(
    model: &FittedModel,
    ds: &Dataset,
    idx: &LevelIndex,
    way: usize,
) -> Vec<Vec<f64>> {
    let params = &model.params;
    let n_groups = params.alpha[way].len();
    let fam = ds.family();
    (0..ds.level_counts()[way])
        .map(|l| {
            let members: Vec<(f64, f64)> = idx
                .members(way, l)
                .iter()
                .map(|&i| {
                    let i = i as usize;
                    let mut off = 0.0;
                    for (x, b) in ds.xrow(i).iter().zip(&params.beta) {
                        off += x * b;
                    }
                    for k in 0..params.alpha.len() {
                        if k != way {
                            off += params.alpha[k][params.gamma[k][ds.way_code(k, i)]];
                        }
                    }
                    (ds.response(i), off)
                })
                .collect();
            let weights: Vec<f64> = (0..n_groups)
                .map(|g| {
                    let a_g = params.alpha[way][g];
                    members
                        .iter()
                        .map(|&(y, off)| fam.log_density_raw(y, off + a_g, params.psi))
                        .sum()
                })
                .collect();
            let m = weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let unnorm: Vec<f64> = weights.iter().map(|&w| (w - m).exp()).collect();
            let total: f64 = unnorm.iter().sum();
            unnorm.into_iter().map(|u| u / total).collect()
        })
        .collect()
}

/// Smoothed per-level effects for every way (ways processed in index order,
/// each using the other ways' point effects). Leaves `beta_smoothed` empty.
pub fn smooth_effects(model: &FittedModel, ds: &Dataset, idx: &LevelIndex) -> SmoothedEffects {
    let mut pi = Vec::with_capacity(ds.n_ways());
    let mut effects = Vec::with_capacity(ds.n_ways());
    for way in 0..ds.n_ways() {
        let probs = pseudo_posterior(model, ds, idx, way);
        let eff: Vec<f64> = probs
            .iter()
            .map(|row| {
                row.iter()
                    .zip(&model.params.alpha[way])
                    .map(|(p, a)| p * a)
                    .sum()
            })
            .collect();
        pi.push(probs);
        effects.push(eff);
    }
    SmoothedEffects {
        pi,
        effects,
        beta_smoothed: Vec::new(),
        psi_smoothed: 1.0,
    }
}

/// Re-estimates `(beta, psi)` by full maximization of the log likelihood
/// with the smoothed effects as offsets: closed-form least squares for the
/// gaussian family, damped Newton to a 1e-10 gradient sup-norm otherwise.
pub fn reestimate_beta(ds: &Dataset, smoothed: &SmoothedEffects) -> Result<(Vec<f64>, f64)> {
    let n = ds.n_obs();
    let p = ds.n_covariates();
    let offset: Vec<f64> = (0..n)
        .map(|i| {
            (0..ds.n_ways())
                .map(|k| smoothed.effects[k][ds.way_code(k, i)])
                .sum()
        })
        .collect();
    let fam = ds.family();
    if let Family::Gaussian = fam {
        let beta = if p > 0 {
            let xtx = DMatrix::from_fn(p, p, |a, b| {
                (0..n).map(|i| ds.xrow(i)[a] * ds.xrow(i)[b]).sum()
            });
            let mut rhs = DVector::<f64>::zeros(p);
            for i in 0..n {
                let r = ds.response(i) - offset[i];
                for (j, x) in ds.xrow(i).iter().enumerate() {
                    rhs[j] += x * r;
                }
            }
            let ch = Cholesky::new(xtx).ok_or(Error::RankDeficient { column: 0 })?;
            ch.solve(&rhs).as_slice().to_vec()
        } else {
            Vec::new()
        };
        let mut ss = 0.0;
        for i in 0..n {
            let eta: f64 = ds.xrow(i).iter().zip(&beta).map(|(x, b)| x * b).sum();
            let r = ds.response(i) - eta - offset[i];
            ss += r * r;
        }
        return Ok((beta, (ss / n as f64).max(crate::estimator::PSI_FLOOR)));
    }

    let mut beta = vec![0.0; p];
    if p == 0 {
        return Ok((beta, 1.0));
    }
    let ll_of = |beta: &[f64]| -> f64 {
        (0..n)
            .map(|i| {
                let eta: f64 = ds.xrow(i).iter().zip(beta).map(|(x, b)| x * b).sum();
                fam.log_density_raw(ds.response(i), eta + offset[i], 1.0)
            })
            .sum()
    };
    let mut ll = ll_of(&beta);
    for _ in 0..200 {
        let mut grad = DVector::<f64>::zeros(p);
        let mut hess = DMatrix::<f64>::zeros(p, p);
        for i in 0..n {
            let x = ds.xrow(i);
            let eta: f64 = x.iter().zip(&beta).map(|(x, b)| x * b).sum::<f64>() + offset[i];
            let y = ds.response(i);
            let d1 = fam.d1_raw(y, eta, 1.0).ok_or_else(|| {
                Error::Estimation(format!(
                    "category probability underflow at observation {} in re-estimation",
                    i + 1
                ))
            })?;
            let d2 = fam.d2_raw(y, eta, 1.0).ok_or_else(|| {
                Error::Estimation(format!(
                    "category probability underflow at observation {} in re-estimation",
                    i + 1
                ))
            })?;
            for a in 0..p {
                grad[a] += d1 * x[a];
                for b in 0..p {
                    hess[(a, b)] += d2 * x[a] * x[b];
                }
            }
        }
        if grad.amax() <= 1e-10 {
            break;
        }
        let delta = Cholesky::new(-hess)
            .ok_or(Error::RankDeficient { column: 0 })?
            .solve(&grad);
        let slack = 1e-12 * (1.0 + ll.abs());
        let mut step = 1.0;
        let mut moved = false;
        for _ in 0..40 {
            let trial: Vec<f64> = beta
                .iter()
                .zip(delta.iter())
                .map(|(b, d)| b + step * d)
                .collect();
            let ll_t = ll_of(&trial);
            if ll_t >= ll - slack {
                beta = trial;
                ll = ll_t;
                moved = true;
                break;
            }
            step *= 0.5;
        }
        if !moved || delta.amax() * step <= 1e-14 {
            break;
        }
    }
    Ok((beta, 1.0))
}

/// Full post-hoc pass: pseudo-posterior matrices, smoothed effects, and the
/// re-estimated regression block.
pub fn smooth(model: &FittedModel, ds: &Dataset, idx: &LevelIndex) -> Result<SmoothedEffects> {
    let mut s = smooth_effects(model, ds, idx);
    let (beta, psi) = reestimate_beta(ds, &s)?;
    s.beta_smoothed = beta;
    s.psi_smoothed = psi;
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::build_level_index;
    use crate::estimator::{FitWarnings, ModelParams};

    fn toy_model(ds: &Dataset, alpha: Vec<Vec<f64>>, gamma: Vec<Vec<usize>>) -> FittedModel {
        FittedModel {
            params: ModelParams {
                beta: vec![0.0; ds.n_covariates()],
                psi: 1.0,
                alpha: alpha.clone(),
                gamma,
            },
            lambda: 100.0,
            family: ds.family().clone(),
            group_counts: alpha.iter().map(|a| a.len()).collect(),
            objective_trace: vec![0.0],
            block_trace: vec![],
            converged: true,
            sweeps: 1,
            warnings: FitWarnings::default(),
        }
    }

    fn logistic_ds() -> Dataset {
        Dataset::from_coded(
            Family::BernoulliLogit,
            vec![1.0, 0.0, 1.0, 1.0, 0.0, 1.0],
            vec![],
            0,
            vec![vec![0, 0, 1, 1, 2, 2], vec![0, 1, 0, 1, 0, 1]],
            vec![3, 2],
        )
        .unwrap()
    }

    #[test]
    fn single_group_gives_unit_probabilities() {
        let ds = logistic_ds();
        let idx = build_level_index(&ds);
        let model = toy_model(&ds, vec![vec![0.3], vec![0.1]], vec![vec![0; 3], vec![0; 2]]);
        let pi = pseudo_posterior(&model, &ds, &idx, 0);
        for row in pi {
            assert_eq!(row, vec![1.0]);
        }
    }

    #[test]
    fn identical_effects_split_evenly() {
        let ds = logistic_ds();
        let idx = build_level_index(&ds);
        let model = toy_model(
            &ds,
            vec![vec![0.4, 0.4], vec![0.0]],
            vec![vec![0, 1, 0], vec![0, 0]],
        );
        let pi = pseudo_posterior(&model, &ds, &idx, 0);
        for row in pi {
            assert!((row[0] - 0.5).abs() < 1e-15);
            assert!((row[1] - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn strong_separation_concentrates() {
        // Level 0 of way 0 has y = (1, 1) under candidate effects (-5, +5):
        // the +5 group dominates.
        let ds = Dataset::from_coded(
            Family::BernoulliLogit,
            vec![1.0, 1.0, 0.0, 0.0],
            vec![],
            0,
            vec![vec![0, 0, 1, 1], vec![0, 0, 0, 0]],
            vec![2, 1],
        )
        .unwrap();
        let idx = build_level_index(&ds);
        let model = toy_model(&ds, vec![vec![-5.0, 5.0], vec![0.0]], vec![vec![1, 0], vec![0]]);
        let pi = pseudo_posterior(&model, &ds, &idx, 0);
        assert!(pi[0][1] > 0.99, "pi = {:?}", pi[0]);
        // Direct evaluation of the two products as an independent check.
        let p_hi = crate::family::logistic(5.0);
        let p_lo = crate::family::logistic(-5.0);
        let w_hi = p_hi * p_hi;
        let w_lo = p_lo * p_lo;
        assert!((pi[0][1] - w_hi / (w_hi + w_lo)).abs() < 1e-12);
    }

    #[test]
    fn smoothed_effects_are_weighted_averages() {
        let ds = logistic_ds();
        let idx = build_level_index(&ds);
        let model = toy_model(
            &ds,
            vec![vec![-2.0, 3.0], vec![0.0]],
            vec![vec![0, 1, 0], vec![0, 0]],
        );
        let sm = smooth_effects(&model, &ds, &idx);
        for (l, row) in sm.pi[0].iter().enumerate() {
            let want = row[0] * -2.0 + row[1] * 3.0;
            assert!((sm.effects[0][l] - want).abs() < 1e-14);
            assert!(sm.effects[0][l] >= -2.0 && sm.effects[0][l] <= 3.0);
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn reestimate_with_point_effects_reproduces_fitted_beta() {
        // Smoothed effects equal to the expanded point effects pose the same
        // optimization problem the fit already solved.
        let (ds, _) = crate::sim::gen_two_way_logistic(800, crate::sim::Scenario::S1, 6);
        let cfg = crate::estimator::FitConfig {
            tol_obj: 1e-12,
            max_iter: 1000,
            ..Default::default()
        };
        let model = crate::estimator::fit(&ds, &cfg).unwrap();
        let effects: Vec<Vec<f64>> = (0..ds.n_ways())
            .map(|k| {
                model.params.gamma[k]
                    .iter()
                    .map(|&g| model.params.alpha[k][g])
                    .collect()
            })
            .collect();
        let sm = SmoothedEffects {
            pi: Vec::new(),
            effects,
            beta_smoothed: Vec::new(),
            psi_smoothed: 1.0,
        };
        let (beta, _) = reestimate_beta(&ds, &sm).unwrap();
        for (a, b) in beta.iter().zip(&model.params.beta) {
            assert!((a - b).abs() < 1e-8, "reestimated {a} vs fitted {b}");
        }
    }

    #[test]
    fn logistic_reestimate_matches_golden_section_oracle() {
        // Labels cross the covariate sign twice so the likelihood has an
        // interior maximum.
        let ds = Dataset::from_coded(
            Family::BernoulliLogit,
            vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 1.0],
            vec![0.6, -1.1, 1.8, 0.4, -0.3, 0.9, -1.5, 0.2],
            1,
            vec![vec![0, 0, 1, 1, 0, 1, 0, 1]],
            vec![2],
        )
        .unwrap();
        let sm = SmoothedEffects {
            pi: Vec::new(),
            effects: vec![vec![0.4, -0.6]],
            beta_smoothed: Vec::new(),
            psi_smoothed: 1.0,
        };
        let (beta, _) = reestimate_beta(&ds, &sm).unwrap();
        // Derivative-free oracle on the same offset likelihood.
        let ll = |b: f64| -> f64 {
            (0..ds.n_obs())
                .map(|i| {
                    let eta = b * ds.xrow(i)[0] + sm.effects[0][ds.way_code(0, i)];
                    ds.family().log_density(ds.response(i), eta, 1.0).unwrap()
                })
                .sum()
        };
        let inv_phi = (5.0_f64.sqrt() - 1.0) / 2.0;
        let (mut lo, mut hi) = (-10.0, 10.0);
        let (mut c, mut d) = (hi - inv_phi * (hi - lo), lo + inv_phi * (hi - lo));
        let (mut fc, mut fd) = (ll(c), ll(d));
        while hi - lo > 1e-12 {
            if fc > fd {
                hi = d;
                d = c;
                fd = fc;
                c = hi - inv_phi * (hi - lo);
                fc = ll(c);
            } else {
                lo = c;
                c = d;
                fc = fd;
                d = lo + inv_phi * (hi - lo);
                fd = ll(d);
            }
        }
        let oracle = 0.5 * (lo + hi);
        assert!((beta[0] - oracle).abs() < 1e-6, "newton {} vs oracle {oracle}", beta[0]);
    }

    #[test]
    fn gaussian_reestimate_matches_least_squares() {
        let ds = Dataset::from_coded(
            Family::Gaussian,
            vec![1.0, 2.0, 3.0, 2.5],
            vec![0.5, -1.0, 2.0, 0.0],
            1,
            vec![vec![0, 0, 1, 1]],
            vec![2],
        )
        .unwrap();
        let idx = build_level_index(&ds);
        let model = toy_model(&ds, vec![vec![1.0, 2.0]], vec![vec![0, 1]]);
        let sm = smooth(&model, &ds, &idx).unwrap();
        // Closed-form least squares on (y - smoothed offset).
        let off: Vec<f64> = (0..4).map(|i| sm.effects[0][ds.way_code(0, i)]).collect();
        let x = [0.5, -1.0, 2.0, 0.0];
        let y = [1.0, 2.0, 3.0, 2.5];
        let sxx: f64 = x.iter().map(|v| v * v).sum();
        let sxy: f64 = x
            .iter()
            .zip(y.iter().zip(off))
            .map(|(xi, (yi, oi))| xi * (yi - oi))
            .sum();
        assert!((sm.beta_smoothed[0] - sxy / sxx).abs() < 1e-12);
    }
}
