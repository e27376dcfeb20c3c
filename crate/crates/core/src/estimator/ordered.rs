//! Baseline ordered probit without effects: joint maximum likelihood in the
//! thresholds and regression coefficients. The fitted thresholds are then
//! held fixed by the full crossed-effects fit, and the baseline coefficients
//! serve as a no-effects comparator.
//!
//! Monotonicity of the thresholds is enforced by reparameterization:
//! `c_1 = t_1` and `c_j = c_{j-1} + exp(t_j)` for `j >= 2`. The likelihood
//! is concave in `(c, beta)`; the damped Newton iteration below works in
//! `t`-space with the exact chain-rule gradient and Hessian plus a ridge
//! fallback for the (rare) non-concave `t`-space iterate.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::family::{Family, OrderedTerms};

/// Maximizes the no-effects ordered probit likelihood jointly in
/// `(thresholds, beta)`. Returns the thresholds (strictly increasing) and
/// the baseline coefficients.
pub fn fit_ordered_null(ds: &Dataset, n_categories: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let thresholds_len = match ds.family() {
        Family::OrderedProbit { thresholds } => thresholds.len(),
        _ => {
            return Err(Error::Config(
                "fit_ordered_null requires the ordered probit family".into(),
            ))
        }
    };
    if n_categories < 2 || thresholds_len != n_categories - 1 {
        return Err(Error::Config(format!(
            "family declares {} categories but {} requested",
            thresholds_len + 1,
            n_categories
        )));
    }
    let n = ds.n_obs();
    let p = ds.n_covariates();
    let mut counts = vec![0usize; n_categories];
    for i in 0..n {
        counts[ds.response(i) as usize - 1] += 1;
    }
    if let Some(k) = counts.iter().position(|&c| c == 0) {
        return Err(Error::Estimation(format!(
            "category {} absent from the data; cannot estimate its thresholds",
            k + 1
        )));
    }

    // Start from the empirical-CDF probit cuts (exact solution when p = 0).
    let mut cum = 0.0;
    let mut c: Vec<f64> = Vec::with_capacity(n_categories - 1);
    for &cnt in counts.iter().take(n_categories - 1) {
        cum += cnt as f64 / n as f64;
        c.push(crate::math::normal_quantile(cum));
    }
    let mut t = to_t(&c);
    let mut beta = vec![0.0; p];
    let dim = t.len() + p;
    let mut ll = loglik(ds, &c, &beta);
    let tol = 1e-10 * n as f64;

    for _iter in 0..200 {
        let (grad_c, grad_b, h_cc, h_cb, h_bb) = derivatives(ds, &c, &beta);
        // Pull back to t-space: J[j][l] = d c_j / d t_l.
        let m = c.len();
        let mut jac = DMatrix::<f64>::zeros(m, m);
        for j in 0..m {
            jac[(j, 0)] = 1.0;
            for l in 1..=j {
                jac[(j, l)] = t[l].exp();
            }
        }
        let grad_c_v = DVector::from_column_slice(&grad_c);
        let grad_t = jac.transpose() * &grad_c_v;
        let mut h_tt = jac.transpose() * &h_cc * &jac;
        for l in 1..m {
            // Second derivative of c_j in t_l is exp(t_l) for every j >= l.
            let extra: f64 = (l..m).map(|j| grad_c[j]).sum::<f64>() * t[l].exp();
            h_tt[(l, l)] += extra;
        }
        let h_tb = jac.transpose() * &h_cb;

        let mut grad = DVector::<f64>::zeros(dim);
        for j in 0..m {
            grad[j] = grad_t[j];
        }
        for j in 0..p {
            grad[m + j] = grad_b[j];
        }
        if grad.amax() <= tol {
            break;
        }
        let mut hess = DMatrix::<f64>::zeros(dim, dim);
        hess.view_mut((0, 0), (m, m)).copy_from(&h_tt);
        hess.view_mut((0, m), (m, p)).copy_from(&h_tb);
        hess.view_mut((m, 0), (p, m)).copy_from(&h_tb.transpose());
        hess.view_mut((m, m), (p, p)).copy_from(&h_bb);

        let delta = solve_ascent(&hess, &grad)?;
        let slack = 1e-12 * (1.0 + ll.abs());
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let mut t_try = t.clone();
            let mut b_try = beta.clone();
            for j in 0..m {
                t_try[j] += step * delta[j];
            }
            for j in 0..p {
                b_try[j] += step * delta[m + j];
            }
            let c_try = from_t(&t_try);
            let ll_try = loglik(ds, &c_try, &b_try);
            if ll_try.is_finite() && ll_try >= ll - slack {
                t = t_try;
                beta = b_try;
                c = c_try;
                let advanced = (ll_try - ll).abs();
                ll = ll_try;
                accepted = true;
                if advanced <= slack {
                    // Line search stalled at the optimum.
                    return Ok((c, beta));
                }
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            return Err(Error::NoProgress {
                block: "ordered null fit".into(),
                sweep: 0,
                detail: format!("gradient sup-norm {:.3e}", grad.amax()),
            });
        }
    }
    Ok((c, beta))
}

fn to_t(c: &[f64]) -> Vec<f64> {
    let mut t = vec![c[0]];
    for w in c.windows(2) {
        t.push((w[1] - w[0]).ln());
    }
    t
}

fn from_t(t: &[f64]) -> Vec<f64> {
    let mut c = vec![t[0]];
    for &g in &t[1..] {
        c.push(c.last().unwrap() + g.exp());
    }
    c
}

fn eta_of(ds: &Dataset, beta: &[f64], i: usize) -> f64 {
    ds.xrow(i).iter().zip(beta).map(|(x, b)| x * b).sum()
}

fn loglik(ds: &Dataset, c: &[f64], beta: &[f64]) -> f64 {
    let mut ll = 0.0;
    for i in 0..ds.n_obs() {
        let terms = OrderedTerms::new(c, ds.response(i) as usize, eta_of(ds, beta, i));
        ll += terms.prob.max(1e-300).ln();
    }
    ll
}

#[allow(clippy::type_complexity)]
fn derivatives(
    ds: &Dataset,
    c: &[f64],
    beta: &[f64],
) -> (Vec<f64>, Vec<f64>, DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    let m = c.len();
    let p = beta.len();
    let mut grad_c = vec![0.0; m];
    let mut grad_b = vec![0.0; p];
    let mut h_cc = DMatrix::<f64>::zeros(m, m);
    let mut h_cb = DMatrix::<f64>::zeros(m, p);
    let mut h_bb = DMatrix::<f64>::zeros(p, p);
    for i in 0..ds.n_obs() {
        let cat = ds.response(i) as usize;
        let eta = eta_of(ds, beta, i);
        let terms = OrderedTerms::new(c, cat, eta);
        let prob = terms.prob.max(1e-300);
        let s = (terms.phi_v - terms.phi_u) / prob;
        let w = {
            let a = if terms.phi_u == 0.0 { 0.0 } else { terms.u * terms.phi_u };
            let b = if terms.phi_v == 0.0 { 0.0 } else { terms.v * terms.phi_v };
            (a - b) / prob
        };
        let x = ds.xrow(i);
        let coef_bb = -(s * s + w);
        for a in 0..p {
            grad_b[a] += s * x[a];
            for b in 0..p {
                h_bb[(a, b)] += coef_bb * x[a] * x[b];
            }
        }
        let upper = (cat <= m).then(|| cat - 1); // c index of the upper cut
        let lower = (cat >= 2).then(|| cat - 2);
        if let Some(j) = upper {
            let a_coef = terms.phi_u / prob;
            grad_c[j] += a_coef;
            h_cc[(j, j)] += -terms.u * terms.phi_u / prob - a_coef * a_coef;
            let cb = terms.phi_u * (terms.u - s) / prob;
            for b in 0..p {
                h_cb[(j, b)] += cb * x[b];
            }
        }
        if let Some(j) = lower {
            let b_coef = -terms.phi_v / prob;
            grad_c[j] += b_coef;
            h_cc[(j, j)] += terms.v * terms.phi_v / prob - b_coef * b_coef;
            let cb = -terms.phi_v * (terms.v - s) / prob;
            for b in 0..p {
                h_cb[(j, b)] += cb * x[b];
            }
        }
        if let (Some(ju), Some(jl)) = (upper, lower) {
            let mixed = terms.phi_u * terms.phi_v / (prob * prob);
            h_cc[(ju, jl)] += mixed;
            h_cc[(jl, ju)] += mixed;
        }
    }
    (grad_c, grad_b, h_cc, h_cb, h_bb)
}

/// Solves `(-H) delta = grad` with an escalating ridge when `-H` is not
/// positive definite (possible in `t`-space away from the optimum).
fn solve_ascent(hess: &DMatrix<f64>, grad: &DVector<f64>) -> Result<DVector<f64>> {
    let neg_h = -hess;
    let scale = neg_h.diagonal().amax().max(1e-12);
    let mut ridge = 0.0;
    for _ in 0..30 {
        let mut m = neg_h.clone();
        for j in 0..m.nrows() {
            m[(j, j)] += ridge;
        }
        if let Some(ch) = Cholesky::new(m) {
            return Ok(ch.solve(grad));
        }
        ridge = if ridge == 0.0 { 1e-10 * scale } else { ridge * 10.0 };
    }
    Err(Error::Estimation(
        "ordered null fit: Hessian not invertible".into(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Dataset;
    use crate::math::normal_quantile;

    fn ordered_ds(y: Vec<f64>, x: Vec<f64>, p: usize, k: usize) -> Dataset {
        let n = y.len();
        Dataset::from_coded(
            Family::ordered_probit_default(k).unwrap(),
            y,
            x,
            p,
            vec![(0..n as u32).map(|i| i % 2).collect()],
            vec![2],
        )
        .unwrap()
    }

    #[test]
    fn binary_no_covariates_matches_probit_of_cdf() {
        let mut y = vec![1.0; 30];
        y.extend(vec![2.0; 70]);
        let ds = ordered_ds(y, vec![], 0, 2);
        let (c, beta) = fit_ordered_null(&ds, 2).unwrap();
        assert!(beta.is_empty());
        assert!((c[0] - normal_quantile(0.3)).abs() < 1e-8, "c={}", c[0]);
    }

    #[test]
    fn three_categories_match_empirical_cdf() {
        let mut y = vec![1.0; 20];
        y.extend(vec![2.0; 50]);
        y.extend(vec![3.0; 30]);
        let ds = ordered_ds(y, vec![], 0, 3);
        let (c, _) = fit_ordered_null(&ds, 3).unwrap();
        assert!((c[0] - normal_quantile(0.2)).abs() < 1e-8);
        assert!((c[1] - normal_quantile(0.7)).abs() < 1e-8);
    }

    #[test]
    fn absent_category_is_named() {
        let y = vec![1.0, 1.0, 3.0, 3.0];
        let ds = ordered_ds(y, vec![], 0, 3);
        let err = fit_ordered_null(&ds, 3).unwrap_err();
        assert!(err.to_string().contains("category 2"), "{err}");
    }

    #[test]
    fn gradient_and_hessian_match_finite_differences() {
        // Small dataset with two covariates exercises every derivative block.
        let y = vec![1.0, 2.0, 3.0, 2.0, 3.0, 1.0, 2.0, 2.0];
        let x = vec![
            0.5, -0.2, -1.0, 0.3, 0.2, 0.8, 1.5, -0.5, -0.7, 0.1, 0.4, 0.9, -0.3, -1.2, 0.6, 0.05,
        ];
        let ds = Dataset::from_coded(
            Family::ordered_probit_default(3).unwrap(),
            y,
            x,
            2,
            vec![vec![0, 1, 0, 1, 0, 1, 0, 1]],
            vec![2],
        )
        .unwrap();
        let c = vec![-0.4, 0.7];
        let beta = vec![0.3, -0.6];
        let (gc, gb, hcc, hcb, hbb) = derivatives(&ds, &c, &beta);
        let h = 1e-6;
        let ll = |c: &[f64], b: &[f64]| loglik(&ds, c, b);
        for j in 0..2 {
            let mut cp = c.clone();
            let mut cm = c.clone();
            cp[j] += h;
            cm[j] -= h;
            let fd = (ll(&cp, &beta) - ll(&cm, &beta)) / (2.0 * h);
            assert!((fd - gc[j]).abs() < 1e-5 * (1.0 + gc[j].abs()), "grad_c[{j}]");
        }
        for j in 0..2 {
            let mut bp = beta.clone();
            let mut bm = beta.clone();
            bp[j] += h;
            bm[j] -= h;
            let fd = (ll(&c, &bp) - ll(&c, &bm)) / (2.0 * h);
            assert!((fd - gb[j]).abs() < 1e-5 * (1.0 + gb[j].abs()), "grad_b[{j}]");
        }
        // Hessian blocks against finite differences of the analytic gradient.
        for j in 0..2 {
            let mut cp = c.clone();
            let mut cm = c.clone();
            cp[j] += h;
            cm[j] -= h;
            let (gcp, gbp, ..) = derivatives(&ds, &cp, &beta);
            let (gcm, gbm, ..) = derivatives(&ds, &cm, &beta);
            for i in 0..2 {
                let fd = (gcp[i] - gcm[i]) / (2.0 * h);
                assert!((fd - hcc[(i, j)]).abs() < 1e-4 * (1.0 + hcc[(i, j)].abs()), "h_cc[{i}{j}]");
                let fd_b = (gbp[i] - gbm[i]) / (2.0 * h);
                assert!((fd_b - hcb[(j, i)]).abs() < 1e-4 * (1.0 + hcb[(j, i)].abs()), "h_cb");
            }
        }
        for j in 0..2 {
            let mut bp = beta.clone();
            let mut bm = beta.clone();
            bp[j] += h;
            bm[j] -= h;
            let (_, gbp, ..) = derivatives(&ds, &c, &bp);
            let (_, gbm, ..) = derivatives(&ds, &c, &bm);
            for i in 0..2 {
                let fd = (gbp[i] - gbm[i]) / (2.0 * h);
                assert!((fd - hbb[(i, j)]).abs() < 1e-4 * (1.0 + hbb[(i, j)].abs()), "h_bb");
            }
        }
    }

    #[test]
    fn recovers_known_parameters_from_large_sample() {
        use rand::SeedableRng;
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let n = 50_000;
        let c_true = vec![-0.8, 0.5];
        let beta_true = [0.7];
        let mut y = Vec::with_capacity(n);
        let mut x = Vec::with_capacity(n);
        for _ in 0..n {
            let xi: f64 = StandardNormal.sample(&mut rng);
            let eta = beta_true[0] * xi;
            let e: f64 = StandardNormal.sample(&mut rng);
            let latent = eta + e;
            let cat = 1 + c_true.iter().filter(|&&cj| latent > cj).count();
            y.push(cat as f64);
            x.push(xi);
        }
        let ds = Dataset::from_coded(
            Family::ordered_probit_default(3).unwrap(),
            y,
            x,
            1,
            vec![(0..n as u32).map(|i| i % 3).collect()],
            vec![3],
        )
        .unwrap();
        let (c, beta) = fit_ordered_null(&ds, 3).unwrap();
        // Monte Carlo error at n = 50k is well under 0.03.
        assert!((c[0] - c_true[0]).abs() < 0.03, "c0={}", c[0]);
        assert!((c[1] - c_true[1]).abs() < 0.03, "c1={}", c[1]);
        assert!((beta[0] - beta_true[0]).abs() < 0.03, "beta={}", beta[0]);
    }
}
