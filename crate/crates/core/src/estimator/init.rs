//! Initialization of assignments and effect supports.
//!
//! The quantile strategy is deterministic: working residuals from a null fit
//! (grand mean, empirical logit, log mean; the ordered probit starts from a
//! zero linear predictor since its location lives in the thresholds) are
//! averaged per level, levels are sorted and cut into equal-frequency bins
//! per way, and the initial supports are the bin means plus an equal share
//! of the null intercept, re-centered so adjacent way means match.
//!
//! The random strategy keeps the residual ordering but draws the bin
//! boundaries uniformly at random, after adjusting the residuals for the
//! covariates with a small effect-free fit. Uniformly drawn partitions are
//! useless starts here: every mixed group's update averages it toward the
//! grand mean before the assignment block ever runs, so multi-start
//! exploration over them goes nowhere, while randomized order-respecting
//! cuts enumerate exactly the configurations a scalar-support argmax can
//! prefer.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{Dataset, LevelIndex};
use crate::family::Family;

use super::{Init, ModelParams};

pub(crate) fn initialize(
    ds: &Dataset,
    idx: &LevelIndex,
    init: Init,
    seed: u64,
    groups: &[usize],
) -> ModelParams {
    let eta0 = null_eta(ds);
    let fam = ds.family();
    let k_ways = ds.n_ways();
    // Random starts adjust for the covariates before measuring level
    // residuals (otherwise the x-part scrambles the level ordering the
    // centers are drawn from); the quantile strategy is pinned to the
    // effect-free null.
    let (beta0, base0) = match init {
        Init::Quantile => (vec![0.0; ds.n_covariates()], eta0),
        Init::Random => covariate_null_fit(ds, eta0),
    };
    let eta_of = |i: usize| -> f64 {
        let mut e = base0;
        for (x, b) in ds.xrow(i).iter().zip(&beta0) {
            e += x * b;
        }
        e
    };
    // One-step Newton residuals d1/(-d2) at the null predictor; zero when the
    // curvature vanishes or an ordered cell underflows.
    let resid: Vec<f64> = (0..ds.n_obs())
        .map(|i| {
            let y = ds.response(i);
            let e = eta_of(i);
            match (fam.d1_raw(y, e, 1.0), fam.d2_raw(y, e, 1.0)) {
                (Some(d1), Some(d2)) if d2 < -1e-300 => d1 / (-d2),
                _ => 0.0,
            }
        })
        .collect();
    let level_resid: Vec<Vec<f64>> = (0..k_ways)
        .map(|k| {
            (0..ds.level_counts()[k])
                .map(|l| {
                    let members = idx.members(k, l);
                    members.iter().map(|&i| resid[i as usize]).sum::<f64>() / members.len() as f64
                })
                .collect()
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gamma: Vec<Vec<usize>> = Vec::with_capacity(k_ways);
    for k in 0..k_ways {
        let n_k = ds.level_counts()[k];
        let g_k = groups[k];
        let mut order: Vec<usize> = (0..n_k).collect();
        order.sort_by(|&a, &b| {
            level_resid[k][a]
                .partial_cmp(&level_resid[k][b])
                .unwrap()
                .then(a.cmp(&b))
        });
        // Bin boundaries over the residual-ordered levels: equal-frequency
        // cuts for the quantile strategy, uniformly drawn distinct cut
        // positions for random starts. Order-respecting partitions are the
        // only candidates a likelihood argmax over scalar supports can
        // prefer, so randomizing the cut positions explores exactly the
        // useful configurations.
        let cuts: Vec<usize> = match init {
            Init::Quantile => (1..g_k).map(|g| g * n_k / g_k).collect(),
            Init::Random => {
                let mut pool: Vec<usize> = (1..n_k).collect();
                for slot in 0..g_k - 1 {
                    let pick = slot + rng.random_range(0..pool.len() - slot);
                    pool.swap(slot, pick);
                }
                let mut cuts = pool[..g_k - 1].to_vec();
                cuts.sort_unstable();
                cuts
            }
        };
        let mut assign = vec![0usize; n_k];
        for (pos, &l) in order.iter().enumerate() {
            assign[l] = cuts.iter().filter(|&&c| pos >= c).count();
        }
        gamma.push(assign);
    }

    // Supports: per-group mean residual plus an equal share of the null
    // intercept (groups are residual-ordered bins, so the means are spread).
    let share = base0 / k_ways as f64;
    let mut alpha: Vec<Vec<f64>> = Vec::with_capacity(k_ways);
    for k in 0..k_ways {
        let g_k = groups[k];
        let mut sums = vec![0.0; g_k];
        let mut counts = vec![0usize; g_k];
        for (l, &g) in gamma[k].iter().enumerate() {
            sums[g] += level_resid[k][l];
            counts[g] += 1;
        }
        alpha.push(
            (0..g_k)
                .map(|g| share + if counts[g] > 0 { sums[g] / counts[g] as f64 } else { 0.0 })
                .collect(),
        );
    }

    // Re-center so every way mean equals the grand mean of way means; the
    // total (the intercept) is preserved because the shifts sum to zero.
    let means: Vec<f64> = (0..k_ways)
        .map(|k| {
            gamma[k].iter().map(|&g| alpha[k][g]).sum::<f64>() / ds.level_counts()[k] as f64
        })
        .collect();
    let target = means.iter().sum::<f64>() / k_ways as f64;
    for k in 0..k_ways {
        let shift = target - means[k];
        for a in alpha[k].iter_mut() {
            *a += shift;
        }
    }

    ModelParams {
        beta: beta0,
        psi: 1.0,
        alpha,
        gamma,
    }
}

/// Null linear predictor per family.
fn null_eta(ds: &Dataset) -> f64 {
    let n = ds.n_obs() as f64;
    let mean = ds.responses().iter().sum::<f64>() / n;
    match ds.family() {
        Family::Gaussian => mean,
        Family::BernoulliLogit => {
            let p = mean.clamp(1.0 / (n + 1.0), n / (n + 1.0));
            (p / (1.0 - p)).ln()
        }
        Family::PoissonLog => mean.max(1.0 / (n + 1.0)).ln(),
        Family::OrderedProbit { .. } => 0.0,
    }
}

/// Effect-free fit of `(intercept, beta)` by damped Newton (the intercept is
/// dropped for the ordered probit, whose location sits in the thresholds).
/// Falls back to the intercept-only null if the data are degenerate.
fn covariate_null_fit(ds: &Dataset, eta0: f64) -> (Vec<f64>, f64) {
    let p = ds.n_covariates();
    if p == 0 {
        return (Vec::new(), eta0);
    }
    let fam = ds.family();
    let with_intercept = !matches!(fam, Family::OrderedProbit { .. });
    let dim = p + usize::from(with_intercept);
    let n = ds.n_obs();
    let mut theta = vec![0.0; dim];
    if with_intercept {
        theta[0] = eta0;
    }
    let row = |i: usize, theta: &[f64]| -> f64 {
        let mut e = 0.0;
        let x = ds.xrow(i);
        if with_intercept {
            e += theta[0];
            for j in 0..p {
                e += x[j] * theta[1 + j];
            }
        } else {
            for j in 0..p {
                e += x[j] * theta[j];
            }
        }
        e
    };
    let ll_of = |theta: &[f64]| -> f64 {
        (0..n).map(|i| fam.log_density_raw(ds.response(i), row(i, theta), 1.0)).sum()
    };
    let mut ll = ll_of(&theta);
    for _ in 0..50 {
        let mut grad = nalgebra::DVector::<f64>::zeros(dim);
        let mut hess = nalgebra::DMatrix::<f64>::zeros(dim, dim);
        for i in 0..n {
            let eta = row(i, &theta);
            let y = ds.response(i);
            let (d1, d2) = match (fam.d1_raw(y, eta, 1.0), fam.d2_raw(y, eta, 1.0)) {
                (Some(a), Some(b)) => (a, b),
                _ => return (vec![0.0; p], eta0),
            };
            let x = ds.xrow(i);
            let z = |c: usize| -> f64 {
                if with_intercept {
                    if c == 0 { 1.0 } else { x[c - 1] }
                } else {
                    x[c]
                }
            };
            for a in 0..dim {
                grad[a] += d1 * z(a);
                for b in 0..dim {
                    hess[(a, b)] += d2 * z(a) * z(b);
                }
            }
        }
        if grad.amax() <= 1e-9 * (1.0 + n as f64) {
            break;
        }
        let delta = match nalgebra::Cholesky::new(-hess) {
            Some(ch) => ch.solve(&grad),
            None => return (vec![0.0; p], eta0),
        };
        let mut step = 1.0;
        let mut moved = false;
        for _ in 0..30 {
            let trial: Vec<f64> =
                theta.iter().zip(delta.iter()).map(|(t, d)| t + step * d).collect();
            let ll_t = ll_of(&trial);
            if ll_t >= ll - 1e-12 * (1.0 + ll.abs()) {
                theta = trial;
                ll = ll_t;
                moved = true;
                break;
            }
            step *= 0.5;
        }
        if !moved {
            break;
        }
    }
    if with_intercept {
        (theta[1..].to_vec(), theta[0])
    } else {
        (theta, 0.0)
    }
}
