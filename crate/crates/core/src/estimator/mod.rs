//! Penalized-likelihood objective and its blockwise coordinate ascent.
//!
//! The objective is the mean log density minus a location-normalizing
//! penalty chaining adjacent ways' mean effects:
//!
//! ```text
//! Q(Psi) = (1/N) sum_i log f(y_i; x_i' beta + sum_k a_{k, g_k(z_ki)}, psi)
//!          - (lambda/2) sum_{k=1}^{K-1} (mean_k - mean_{k+1})^2
//! ```
//!
//! where `mean_k` averages the assigned support values over the *levels* of
//! way k. One sweep updates, in order: the regression block `(beta, psi)`,
//! then for each way its group effects (Gauss-Seidel over groups) followed
//! by its level assignments (Gauss-Seidel over levels, closed by a zero-sum
//! recentering), and finally one joint damped-Newton polish of the whole
//! continuous block `(beta, alpha)` followed by a last recentering. The
//! recentering shifts each way's support by a constant, the shifts summing
//! to zero, which drives the penalty to exactly zero without touching any
//! linear predictor. Every block update maximizes `Q` in its own
//! coordinates (or provably cannot decrease it), so sweeps increase `Q`
//! monotonically; assignment passes evaluate candidates with
//! already-updated levels contributing their new values and later levels
//! their stale ones.
//!
//! The polish and renormalization blocks exist because the penalty, taken
//! one coordinate at a time, resists *every* support move (each shifts its
//! way's mean) even though combined moves are nearly penalty-free; without
//! them the total effect level, the within-way redistributions, and the
//! coefficient-effect coupling converge at rate `O(h / lambda)` per sweep,
//! stalling fits for hundreds of sweeps on directions that barely change
//! any linear predictor.
//!
//! The penalty surrogate used by a group update is obtained by
//! differentiating the chain penalty in that group's support value: for way
//! k with `t = n_{k,g}/n_k` the quadratic weight is
//! `lambda_tilde = lambda * t^2 * N * w_k` with `w_k = 1` for end ways and
//! `2` for interior ways, and the center is the value at which the penalty
//! gradient vanishes. For two ways this reduces to the closed-form weights
//! `(n_g)^2 lambda m / n` of the Gaussian special case.

mod init;
mod ordered;
mod sweep;

pub use ordered::fit_ordered_null;

use serde::{Deserialize, Serialize};

use crate::data::{build_level_index, Dataset, LevelIndex};
use crate::error::{Error, Result};
use crate::family::Family;
use sweep::{AssignScoring, Sweeper};

/// Number of groups per way: an explicit list or the `floor(sqrt(n_k))` rule.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupRule {
    Auto,
    Counts(Vec<usize>),
}

/// Initialization strategy for the assignments and effect supports. With
/// `n_starts > 1` the first start uses the configured strategy and the
/// remaining starts draw random initializations from seeds `seed + 1`, ...
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    /// Per-level mean working residuals from a null fit, cut into
    /// equal-frequency bins per way (deterministic).
    Quantile,
    /// Residual-ordered bins with uniformly drawn random cut positions
    /// (covariate-adjusted residuals), one draw per seed.
    Random,
}

/// Fitting configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub groups: GroupRule,
    pub lambda: f64,
    pub max_iter: usize,
    /// Relative objective-increase tolerance; also the parameter-drift
    /// threshold of the stability criterion.
    pub tol_obj: f64,
    pub max_halvings: u32,
    pub seed: u64,
    pub init: Init,
    pub n_starts: usize,
    /// Record the objective after every block update in
    /// [`FittedModel::block_trace`] (testing aid; off by default).
    pub audit_blocks: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            groups: GroupRule::Auto,
            lambda: 100.0,
            max_iter: 500,
            tol_obj: 1e-8,
            max_halvings: 30,
            seed: 0,
            init: Init::Quantile,
            n_starts: 1,
            audit_blocks: false,
        }
    }
}

impl FitConfig {
    /// Resolves the group rule against a dataset and validates bounds.
    pub fn resolved_groups(&self, ds: &Dataset) -> Result<Vec<usize>> {
        let counts = match &self.groups {
            GroupRule::Auto => ds
                .level_counts()
                .iter()
                .map(|&n| ((n as f64).sqrt().floor() as usize).max(1))
                .collect(),
            GroupRule::Counts(c) => c.clone(),
        };
        if counts.len() != ds.n_ways() {
            return Err(Error::Config(format!(
                "{} group counts for {} ways",
                counts.len(),
                ds.n_ways()
            )));
        }
        for (k, (&g, &n)) in counts.iter().zip(ds.level_counts()).enumerate() {
            if g == 0 || g > n {
                return Err(Error::Config(format!(
                    "way {} has {} levels but {} groups requested",
                    k + 1,
                    n,
                    g
                )));
            }
        }
        Ok(counts)
    }

    fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) {
            return Err(Error::Config("lambda must be positive".into()));
        }
        if self.max_iter == 0 || self.n_starts == 0 {
            return Err(Error::Config("max_iter and n_starts must be positive".into()));
        }
        if !(self.tol_obj > 0.0) {
            return Err(Error::Config("tol_obj must be positive".into()));
        }
        Ok(())
    }
}

/// The parameter collection: regression coefficients, dispersion, per-way
/// effect supports, and per-way level-to-group assignments (0-based).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub beta: Vec<f64>,
    pub psi: f64,
    pub alpha: Vec<Vec<f64>>,
    pub gamma: Vec<Vec<usize>>,
}

impl ModelParams {
    pub(crate) fn check_shape(&self, ds: &Dataset) -> Result<()> {
        if self.beta.len() != ds.n_covariates() {
            return Err(Error::Config("beta length mismatch".into()));
        }
        if self.alpha.len() != ds.n_ways() || self.gamma.len() != ds.n_ways() {
            return Err(Error::Config("effects shape mismatch".into()));
        }
        for k in 0..ds.n_ways() {
            if self.gamma[k].len() != ds.level_counts()[k] {
                return Err(Error::Config(format!("way {} assignment length mismatch", k + 1)));
            }
            let g_k = self.alpha[k].len();
            if g_k == 0 || self.gamma[k].iter().any(|&g| g >= g_k) {
                return Err(Error::Config(format!("way {} assignment out of range", k + 1)));
            }
        }
        if !(self.psi > 0.0) {
            return Err(Error::Config("psi must be positive".into()));
        }
        Ok(())
    }

    /// Linear predictor of observation `i`.
    #[inline]
    pub fn eta(&self, ds: &Dataset, i: usize) -> f64 {
        let x = ds.xrow(i);
        let mut e = 0.0;
        for (b, v) in self.beta.iter().zip(x) {
            e += b * v;
        }
        for k in 0..self.alpha.len() {
            e += self.alpha[k][self.gamma[k][ds.way_code(k, i)]];
        }
        e
    }

    /// Mean over the levels of way `k` of the assigned support values.
    pub fn way_mean(&self, k: usize) -> f64 {
        let s: f64 = self.gamma[k].iter().map(|&g| self.alpha[k][g]).sum();
        s / self.gamma[k].len() as f64
    }
}

/// Counters for events that degrade but do not abort a fit.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FitWarnings {
    /// Ordered-probit category probabilities floored at 1e-300 during the
    /// per-sweep objective evaluations.
    pub underflow_floors: u64,
    /// Group updates skipped because no level was assigned to the group.
    pub empty_groups: u64,
    /// Gaussian dispersion estimates floored at 1e-12.
    pub psi_floors: u64,
}

/// Result of a fit.
#[derive(Debug, Clone)]
pub struct FittedModel {
    pub params: ModelParams,
    pub lambda: f64,
    pub family: Family,
    pub group_counts: Vec<usize>,
    /// Objective after initialization (index 0) and after each sweep.
    pub objective_trace: Vec<f64>,
    /// Objective after every block update; populated only when
    /// [`FitConfig::audit_blocks`] is set.
    pub block_trace: Vec<f64>,
    pub converged: bool,
    pub sweeps: usize,
    pub warnings: FitWarnings,
}

impl FittedModel {
    pub fn objective(&self, ds: &Dataset) -> f64 {
        objective(&self.params, ds, self.lambda)
    }

    pub fn final_objective(&self) -> f64 {
        *self.objective_trace.last().expect("trace never empty")
    }
}

/// Location-normalizing penalty: `(lambda/2)` times the chain of squared
/// differences of adjacent ways' level-mean effects. Identically zero for a
/// single way.
pub fn penalty(alpha: &[Vec<f64>], gamma: &[Vec<usize>], lambda: f64, ds: &Dataset) -> f64 {
    debug_assert_eq!(alpha.len(), ds.n_ways());
    let means: Vec<f64> = (0..ds.n_ways())
        .map(|k| {
            let s: f64 = gamma[k].iter().map(|&g| alpha[k][g]).sum();
            s / ds.level_counts()[k] as f64
        })
        .collect();
    let chain: f64 = means.windows(2).map(|w| (w[0] - w[1]).powi(2)).sum();
    0.5 * lambda * chain
}

/// Penalized objective `Q` at the given parameters. Ordered-probit cell
/// probabilities are floored rather than erroring, so the value is always
/// defined (possibly `-inf` for a diverged Poisson predictor).
pub fn objective(params: &ModelParams, ds: &Dataset, lambda: f64) -> f64 {
    let mut ll = 0.0;
    for i in 0..ds.n_obs() {
        ll += ds
            .family()
            .log_density_raw(ds.response(i), params.eta(ds, i), params.psi);
    }
    ll / ds.n_obs() as f64 - penalty(&params.alpha, &params.gamma, lambda, ds)
}

/// Sum over ways of the level-mean assigned effects; this is the model's
/// intercept (the penalty only normalizes locations, it does not shrink).
pub fn recover_intercept(params: &ModelParams, ds: &Dataset) -> f64 {
    (0..ds.n_ways()).map(|k| params.way_mean(k)).sum()
}

/// One regression-block update: closed form for the gaussian family
/// (`beta` by normal equations, then `psi` as the mean squared residual),
/// one safeguarded Newton step on the pooled offset log likelihood
/// otherwise. Skips `beta` when `p = 0`. Returns the warnings raised by the
/// update (e.g. a floored dispersion).
pub fn update_regression(
    params: &mut ModelParams,
    ds: &Dataset,
    max_halvings: u32,
) -> Result<FitWarnings> {
    let idx = build_level_index(ds);
    let mut sw = Sweeper::new(ds, &idx, 0.0, max_halvings, params.clone())?;
    sw.update_regression()?;
    let warnings = sw.warnings();
    *params = sw.into_params();
    Ok(warnings)
}

/// One group-effect block update for `(way, group)`: exact closed form for
/// the gaussian family, damped Newton iterated to stationarity otherwise.
/// An empty group is left unchanged (and counted in the warnings).
pub fn update_group_effect(
    params: &mut ModelParams,
    ds: &Dataset,
    lambda: f64,
    way: usize,
    group: usize,
    max_halvings: u32,
) -> Result<FitWarnings> {
    let idx = build_level_index(ds);
    let mut sw = Sweeper::new(ds, &idx, lambda, max_halvings, params.clone())?;
    sw.update_group_effect(way, group)?;
    let warnings = sw.warnings();
    *params = sw.into_params();
    Ok(warnings)
}

/// One assignment pass over the levels of `way` in ascending order, each
/// level moved to the group maximizing the exact objective — member log
/// likelihood plus the penalty contribution at the running means, with
/// already-updated levels contributing their new assignments and later
/// levels their stale ones (ties to the smallest group index). Returns the
/// number of levels that moved.
pub fn update_assignments(
    params: &mut ModelParams,
    ds: &Dataset,
    lambda: f64,
    way: usize,
) -> usize {
    let idx = build_level_index(ds);
    let mut sw =
        Sweeper::new(ds, &idx, lambda, 30, params.clone()).expect("shape validated by caller");
    let changes = sw.update_assignments(way, AssignScoring::Naive);
    *params = sw.into_params();
    changes
}

/// Maximizes the penalized objective by blockwise coordinate ascent.
///
/// Runs `n_starts` independent initializations (seeds `seed`, `seed + 1`,
/// ...) and keeps the fit with the largest final objective. Sweeps stop when
/// the relative objective increase drops below `tol_obj`, or when a full
/// sweep leaves every assignment unchanged with parameter drift below
/// `tol_obj`; hitting `max_iter` instead reports `converged = false`.
pub fn fit(ds: &Dataset, cfg: &FitConfig) -> Result<FittedModel> {
    cfg.validate()?;
    let groups = cfg.resolved_groups(ds)?;
    precheck_rank(ds)?;
    let idx = build_level_index(ds);
    let mut best: Option<FittedModel> = None;
    for start in 0..cfg.n_starts {
        let seed = cfg.seed.wrapping_add(start as u64);
        // The first start uses the configured strategy; later starts always
        // draw random initializations (repeating a deterministic quantile
        // start would add nothing).
        let init = if start == 0 { cfg.init } else { Init::Random };
        let params0 = init::initialize(ds, &idx, init, seed, &groups);
        let model = run_sweeps(ds, &idx, cfg, params0, &groups)?;
        let better = best
            .as_ref()
            .map_or(true, |b| model.final_objective() > b.final_objective());
        if better {
            best = Some(model);
        }
    }
    let mut model = best.expect("n_starts >= 1");
    canonicalize(&mut model);
    Ok(model)
}

/// Continues coordinate ascent from explicit initial parameters (used, for
/// example, to re-fit with a different `lambda` from a previous solution).
pub fn fit_warm(ds: &Dataset, cfg: &FitConfig, params: ModelParams) -> Result<FittedModel> {
    cfg.validate()?;
    params.check_shape(ds)?;
    precheck_rank(ds)?;
    let groups: Vec<usize> = params.alpha.iter().map(|a| a.len()).collect();
    let idx = build_level_index(ds);
    let mut model = run_sweeps(ds, &idx, cfg, params, &groups)?;
    canonicalize(&mut model);
    Ok(model)
}

fn run_sweeps(
    ds: &Dataset,
    idx: &LevelIndex,
    cfg: &FitConfig,
    params: ModelParams,
    groups: &[usize],
) -> Result<FittedModel> {
    let mut sw = Sweeper::new(ds, idx, cfg.lambda, cfg.max_halvings, params)?;
    let mut trace = vec![sw.objective(true)];
    let mut block_trace = Vec::new();
    let audit = |sw: &mut Sweeper, out: &mut Vec<f64>| {
        if cfg.audit_blocks {
            out.push(sw.objective(false));
        }
    };
    let mut converged = false;
    let mut sweeps = 0;
    for sweep in 1..=cfg.max_iter {
        sw.begin_sweep(sweep);
        let before = sw.snapshot();
        sw.update_regression()?;
        audit(&mut sw, &mut block_trace);
        let mut changes = 0usize;
        for k in 0..ds.n_ways() {
            for g in 0..groups[k] {
                sw.update_group_effect(k, g)?;
                audit(&mut sw, &mut block_trace);
            }
            // Composite scoring is exact only together with the recentering
            // that closes the pass; audit them as one block.
            changes += sw.update_assignments(k, AssignScoring::Composite);
            changes += sw.swap_pass(k);
            sw.recenter();
            audit(&mut sw, &mut block_trace);
        }
        sw.joint_polish()?;
        sw.recenter();
        audit(&mut sw, &mut block_trace);
        sw.refresh();
        let q = sw.objective(true);
        let q_prev = *trace.last().expect("trace nonempty");
        trace.push(q);
        sweeps = sweep;
        let drift = sw.drift_since(&before);
        if q - q_prev <= cfg.tol_obj * (1.0 + q_prev.abs()) {
            converged = true;
            break;
        }
        if changes == 0 && drift < cfg.tol_obj {
            converged = true;
            break;
        }
    }
    let warnings = sw.warnings();
    Ok(FittedModel {
        params: sw.into_params(),
        lambda: cfg.lambda,
        family: ds.family().clone(),
        group_counts: groups.to_vec(),
        objective_trace: trace,
        block_trace,
        converged,
        sweeps,
        warnings,
    })
}

/// Sorts each way's support ascending and remaps assignments accordingly.
/// Group labels are arbitrary (the objective is label-permutation
/// invariant), so reported models use this canonical order.
fn canonicalize(model: &mut FittedModel) {
    for k in 0..model.params.alpha.len() {
        let a = &model.params.alpha[k];
        let mut order: Vec<usize> = (0..a.len()).collect();
        order.sort_by(|&i, &j| a[i].partial_cmp(&a[j]).unwrap().then(i.cmp(&j)));
        let mut rank = vec![0usize; a.len()];
        for (new, &old) in order.iter().enumerate() {
            rank[old] = new;
        }
        model.params.alpha[k] = order.iter().map(|&i| a[i]).collect();
        for g in model.params.gamma[k].iter_mut() {
            *g = rank[*g];
        }
    }
}

/// Rejects a rank-deficient design up front, naming the offending column
/// (0-based into the covariate list).
fn precheck_rank(ds: &Dataset) -> Result<()> {
    match deficient_column(ds) {
        Some(column) => Err(Error::RankDeficient { column }),
        None => Ok(()),
    }
}

/// Finds a dependent covariate column by column-pivoted QR, if any.
pub(crate) fn deficient_column(ds: &Dataset) -> Option<usize> {
    let (n, p) = (ds.n_obs(), ds.n_covariates());
    if p == 0 {
        return None;
    }
    if n < p {
        return Some(n);
    }
    let x = nalgebra::DMatrix::from_fn(n, p, |i, j| ds.xrow(i)[j]);
    let qr = x.col_piv_qr();
    let r = qr.r();
    let tol = 1e-10 * r[(0, 0)].abs().max(f64::MIN_POSITIVE);
    for i in 0..p {
        if r[(i, i)].abs() < tol {
            // Column i of R corresponds to the i-th pivoted column of X.
            let mut cols = nalgebra::RowDVector::<f64>::from_fn(p, |_, j| j as f64);
            qr.p().permute_columns(&mut cols);
            return Some(cols[i] as usize);
        }
    }
    None
}

pub(crate) const PSI_FLOOR: f64 = 1e-12;
