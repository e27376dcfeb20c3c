//! Outcome families: per-observation log densities and their first and
//! second derivatives with respect to the linear predictor.
//!
//! Every block update of the estimator works through these three functions,
//! so they return the *full* log density (gaussian normalizing constant and
//! Poisson `-log y!` included) to keep objective traces comparable across
//! dispersion updates. All three are pure functions of their inputs and are
//! safe to evaluate concurrently.

use crate::error::{Error, Result};
use crate::math::{normal_cdf, normal_pdf, normal_sf, LN_2PI};
use serde::{Deserialize, Serialize};

/// Floor applied to ordered-probit category probabilities before taking a
/// log. `log_density` returns exactly this value when the floor engaged;
/// the fitter counts such observations in its warnings.
pub const LOG_PROB_FLOOR: f64 = -690.775_527_898_213_7; // ln(1e-300)

const PROB_FLOOR: f64 = 1e-300;

/// Outcome family with link. Thresholds exist only for the ordered probit
/// (strictly increasing, with implicit `c_0 = -inf`, `c_K = +inf`), and only
/// the gaussian carries a dispersion parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Family {
    Gaussian,
    BernoulliLogit,
    PoissonLog,
    OrderedProbit { thresholds: Vec<f64> },
}

impl Family {
    /// Ordered probit with validated thresholds.
    pub fn ordered_probit(thresholds: Vec<f64>) -> Result<Family> {
        if thresholds.is_empty() {
            return Err(Error::Config(
                "ordered probit requires at least one threshold".into(),
            ));
        }
        if thresholds.iter().any(|c| !c.is_finite()) {
            return Err(Error::Config("thresholds must be finite".into()));
        }
        if thresholds.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(
                "thresholds must be strictly increasing".into(),
            ));
        }
        Ok(Family::OrderedProbit { thresholds })
    }

    /// Provisional equally-probable thresholds `Phi^{-1}(j/K)` for a K-category
    /// ordered probit; placeholders until `fit_ordered_null` supplies real ones.
    pub fn ordered_probit_default(k_categories: usize) -> Result<Family> {
        if k_categories < 2 {
            return Err(Error::Config(
                "ordered probit requires at least two categories".into(),
            ));
        }
        let k = k_categories as f64;
        let thresholds = (1..k_categories)
            .map(|j| crate::math::normal_quantile(j as f64 / k))
            .collect();
        Family::ordered_probit(thresholds)
    }

    /// Re-validates a deserialized value (serde bypasses constructors).
    pub fn validate(&self) -> Result<()> {
        if let Family::OrderedProbit { thresholds } = self {
            Family::ordered_probit(thresholds.clone())?;
        }
        Ok(())
    }

    pub fn name(&self) -> &'static str {
        match self {
            Family::Gaussian => "gaussian",
            Family::BernoulliLogit => "bernoulli_logit",
            Family::PoissonLog => "poisson_log",
            Family::OrderedProbit { .. } => "ordered_probit",
        }
    }

    /// True only for the gaussian family.
    pub fn has_dispersion(&self) -> bool {
        matches!(self, Family::Gaussian)
    }

    /// Number of outcome categories (ordered probit only).
    pub fn n_categories(&self) -> Option<usize> {
        match self {
            Family::OrderedProbit { thresholds } => Some(thresholds.len() + 1),
            _ => None,
        }
    }

    /// Checks that `y` lies in the family support.
    pub fn validate_response(&self, y: f64) -> Result<()> {
        let ok = match self {
            Family::Gaussian => y.is_finite(),
            Family::BernoulliLogit => y == 0.0 || y == 1.0,
            Family::PoissonLog => y.is_finite() && y >= 0.0 && y.fract() == 0.0,
            Family::OrderedProbit { thresholds } => {
                let k = thresholds.len() as f64 + 1.0;
                y.fract() == 0.0 && y >= 1.0 && y <= k
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Domain(format!(
                "response {y} outside support of family {}",
                self.name()
            )))
        }
    }

    fn validate_psi(&self, psi: f64) -> Result<()> {
        match self {
            Family::Gaussian => {
                if psi > 0.0 {
                    Ok(())
                } else {
                    Err(Error::Domain(format!("gaussian requires psi > 0, got {psi}")))
                }
            }
            // psi is inert for the other families and must equal 1.
            _ => {
                if psi == 1.0 {
                    Ok(())
                } else {
                    Err(Error::Domain(format!(
                        "family {} requires psi = 1, got {psi}",
                        self.name()
                    )))
                }
            }
        }
    }

    /// Full log density of `y` given linear predictor `eta`.
    ///
    /// Ordered-probit category probabilities are floored at 1e-300; when the
    /// floor engages the returned value is exactly [`LOG_PROB_FLOOR`].
    pub fn log_density(&self, y: f64, eta: f64, psi: f64) -> Result<f64> {
        self.validate_response(y)?;
        self.validate_psi(psi)?;
        Ok(self.log_density_raw(y, eta, psi))
    }

    /// First derivative of [`Family::log_density`] with respect to `eta`.
    pub fn d1_eta(&self, y: f64, eta: f64, psi: f64) -> Result<f64> {
        self.validate_response(y)?;
        self.validate_psi(psi)?;
        self.d1_raw(y, eta, psi).ok_or(Error::Underflow)
    }

    /// Second derivative of [`Family::log_density`] with respect to `eta`;
    /// non-positive for every family (the per-observation objective is
    /// concave in the linear predictor).
    pub fn d2_eta(&self, y: f64, eta: f64, psi: f64) -> Result<f64> {
        self.validate_response(y)?;
        self.validate_psi(psi)?;
        self.d2_raw(y, eta, psi).ok_or(Error::Underflow)
    }

    /// Hot-path log density: skips support validation (dataset construction
    /// already guaranteed it) and floors ordered-probit probabilities.
    #[inline]
    pub(crate) fn log_density_raw(&self, y: f64, eta: f64, psi: f64) -> f64 {
        match self {
            Family::Gaussian => {
                let r = y - eta;
                -0.5 * (LN_2PI + psi.ln()) - 0.5 * r * r / psi
            }
            Family::BernoulliLogit => y * eta - softplus(eta),
            Family::PoissonLog => y * eta - eta.exp() - libm::lgamma(y + 1.0),
            Family::OrderedProbit { thresholds } => {
                let t = OrderedTerms::new(thresholds, y as usize, eta);
                t.prob.max(PROB_FLOOR).ln()
            }
        }
    }

    /// Hot-path first derivative; `None` signals a vanished ordered-probit
    /// cell probability.
    #[inline]
    pub(crate) fn d1_raw(&self, y: f64, eta: f64, psi: f64) -> Option<f64> {
        match self {
            Family::Gaussian => Some((y - eta) / psi),
            Family::BernoulliLogit => Some(y - logistic(eta)),
            Family::PoissonLog => Some(y - eta.exp()),
            Family::OrderedProbit { thresholds } => {
                let t = OrderedTerms::new(thresholds, y as usize, eta);
                if t.prob < PROB_FLOOR {
                    None
                } else {
                    Some(t.score())
                }
            }
        }
    }

    /// Hot-path second derivative; `None` as in [`Family::d1_raw`].
    #[inline]
    pub(crate) fn d2_raw(&self, y: f64, eta: f64, psi: f64) -> Option<f64> {
        match self {
            Family::Gaussian => Some(-1.0 / psi),
            Family::BernoulliLogit => {
                let l = logistic(eta);
                Some(-l * (1.0 - l))
            }
            Family::PoissonLog => Some(-eta.exp()),
            Family::OrderedProbit { thresholds } => {
                let t = OrderedTerms::new(thresholds, y as usize, eta);
                if t.prob < PROB_FLOOR {
                    None
                } else {
                    let s = t.score();
                    Some(-(s * s + t.curvature_term()))
                }
            }
        }
    }

    /// Mean response at linear predictor `eta`: identity, logistic, exp, or
    /// the category-probability-weighted mean for the ordered probit.
    pub fn mean_response(&self, eta: f64) -> f64 {
        match self {
            Family::Gaussian => eta,
            Family::BernoulliLogit => logistic(eta),
            Family::PoissonLog => eta.exp(),
            Family::OrderedProbit { thresholds } => {
                let probs = ordered_category_probs(thresholds, eta);
                probs
                    .iter()
                    .enumerate()
                    .map(|(k, p)| (k as f64 + 1.0) * p)
                    .sum()
            }
        }
    }
}

/// `P(y = k | eta)` for every category `k = 1..=K` of an ordered probit.
pub fn ordered_category_probs(thresholds: &[f64], eta: f64) -> Vec<f64> {
    (1..=thresholds.len() + 1)
        .map(|k| OrderedTerms::new(thresholds, k, eta).prob)
        .collect()
}

#[inline]
pub(crate) fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Per-observation quantities of an ordered-probit category: the interval
/// ends `u = c_y - eta`, `v = c_{y-1} - eta` (with `+/-inf` at the boundary
/// categories) and the cell probability `Phi(u) - Phi(v)`.
pub(crate) struct OrderedTerms {
    pub u: f64,
    pub v: f64,
    pub phi_u: f64,
    pub phi_v: f64,
    pub prob: f64,
}

impl OrderedTerms {
    pub fn new(thresholds: &[f64], category: usize, eta: f64) -> Self {
        let k_max = thresholds.len() + 1;
        debug_assert!((1..=k_max).contains(&category));
        let u = if category == k_max {
            f64::INFINITY
        } else {
            thresholds[category - 1] - eta
        };
        let v = if category == 1 {
            f64::NEG_INFINITY
        } else {
            thresholds[category - 2] - eta
        };
        let phi_u = if u.is_finite() { normal_pdf(u) } else { 0.0 };
        let phi_v = if v.is_finite() { normal_pdf(v) } else { 0.0 };
        // Difference of Phi taken tail-first: subtract the smaller tail from
        // the larger one so the leading digits survive cancellation.
        let prob = if !v.is_finite() && !u.is_finite() {
            1.0
        } else if !v.is_finite() {
            normal_cdf(u)
        } else if !u.is_finite() {
            normal_sf(v)
        } else if u + v > 0.0 {
            normal_sf(v) - normal_sf(u)
        } else {
            normal_cdf(u) - normal_cdf(v)
        };
        OrderedTerms {
            u,
            v,
            phi_u,
            phi_v,
            prob: prob.max(0.0),
        }
    }

    /// `u^(0)`: d/d eta of the log category probability.
    #[inline]
    pub fn score(&self) -> f64 {
        (self.phi_v - self.phi_u) / self.prob
    }

    /// `u^(1)`: `(u phi(u) - v phi(v)) / P`, with `inf * 0 = 0` at the ends.
    #[inline]
    pub fn curvature_term(&self) -> f64 {
        let a = if self.phi_u == 0.0 { 0.0 } else { self.u * self.phi_u };
        let b = if self.phi_v == 0.0 { 0.0 } else { self.v * self.phi_v };
        (a - b) / self.prob
    }
}
