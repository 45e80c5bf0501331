//! Canonical-link generalized linear models fitted by iteratively
//! reweighted least squares (IRLS).
//!
//! Three families are supported, each with its canonical link:
//! Gaussian/identity, Bernoulli/logit and Poisson/log. With a canonical link
//! the working weight equals the family variance `V(mu)` and the score
//! equations read `X' W (y - mu) = 0`, so a model with an intercept
//! reproduces the (weighted) outcome mean on its fitting sample.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{ModelFormula, TrialDataset};
use crate::error::{Error, Result};

/// Floor applied to the working variance.
const VARIANCE_FLOOR: f64 = 1e-12;
/// Pivot tolerance on unit-norm columns for the rank check.
const RANK_TOL: f64 = 1e-9;
/// Fitted probabilities closer than this to 0 or 1 count as boundary fits.
const BOUNDARY_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinkFunction {
    Identity,
    Logit,
    Log,
}

impl LinkFunction {
    /// `g(mu)`
    pub fn link(self, mu: f64) -> f64 {
        match self {
            LinkFunction::Identity => mu,
            LinkFunction::Logit => (mu / (1.0 - mu)).ln(),
            LinkFunction::Log => mu.ln(),
        }
    }

    /// `g^{-1}(eta)`
    pub fn inverse(self, eta: f64) -> f64 {
        match self {
            LinkFunction::Identity => eta,
            LinkFunction::Logit => expit(eta),
            LinkFunction::Log => eta.exp(),
        }
    }

    /// Variance function of the canonical family; equals `d mu / d eta`.
    pub fn variance(self, mu: f64) -> f64 {
        match self {
            LinkFunction::Identity => 1.0,
            LinkFunction::Logit => mu * (1.0 - mu),
            LinkFunction::Log => mu,
        }
    }

    /// Unit deviance `d(y, mu)`.
    pub fn unit_deviance(self, y: f64, mu: f64) -> f64 {
        match self {
            LinkFunction::Identity => (y - mu) * (y - mu),
            LinkFunction::Logit => {
                2.0 * (xlogy(y, y / mu) + xlogy(1.0 - y, (1.0 - y) / (1.0 - mu)))
            }
            LinkFunction::Log => 2.0 * (xlogy(y, y / mu) - (y - mu)),
        }
    }

    fn initial_mean(self, y: f64) -> f64 {
        match self {
            LinkFunction::Identity => y,
            LinkFunction::Logit => (y + 0.5) / 2.0,
            LinkFunction::Log => y + 0.1,
        }
    }

    fn check_outcome(self, y: f64) -> bool {
        match self {
            LinkFunction::Identity => y.is_finite(),
            LinkFunction::Logit => (0.0..=1.0).contains(&y),
            LinkFunction::Log => y >= 0.0 && y.is_finite(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LinkFunction::Identity => "identity",
            LinkFunction::Logit => "logit",
            LinkFunction::Log => "log",
        }
    }
}

/// Numerically stable inverse logit.
pub fn expit(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn xlogy(x: f64, y: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * y.ln()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GlmOptions {
    pub max_iter: usize,
    /// Absolute deviance change declaring convergence.
    pub abs_tol: f64,
    /// Relative deviance change declaring convergence.
    pub rel_tol: f64,
    pub max_halvings: usize,
}

impl Default for GlmOptions {
    fn default() -> Self {
        Self {
            max_iter: 100,
            abs_tol: 1e-10,
            rel_tol: 1e-12,
            max_halvings: 20,
        }
    }
}

/// Result of a GLM fit on one design matrix.
#[derive(Debug, Clone)]
pub struct GlmFit {
    pub link: LinkFunction,
    pub coefficients: DVector<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub deviance: f64,
    /// Deviance after each accepted iteration.
    pub deviance_trace: Vec<f64>,
    /// Fitted means on the fitting sample.
    pub fitted: Vec<f64>,
    /// `(X' W X)^{-1}` at the solution, before dispersion scaling.
    pub unscaled_covariance: DMatrix<f64>,
    /// Residual variance for the Gaussian family, 1 otherwise.
    pub dispersion: f64,
    pub has_intercept: bool,
    /// Number of fitted probabilities at the 0/1 boundary (logit only).
    pub boundary_fits: usize,
}

impl GlmFit {
    pub fn n_params_excluding_intercept(&self) -> usize {
        self.coefficients.len() - usize::from(self.has_intercept)
    }

    /// Model-based standard error of coefficient `j`.
    pub fn std_error(&self, j: usize) -> f64 {
        (self.dispersion * self.unscaled_covariance[(j, j)]).sqrt()
    }
}

/// Maximum-likelihood fit of `y` on `design` with a canonical link.
pub fn fit_glm(
    y: &[f64],
    design: &DMatrix<f64>,
    link: LinkFunction,
    weights: Option<&[f64]>,
) -> Result<GlmFit> {
    fit_glm_with(y, design, link, weights, GlmOptions::default())
}

pub fn fit_glm_with(
    y: &[f64],
    design: &DMatrix<f64>,
    link: LinkFunction,
    weights: Option<&[f64]>,
    options: GlmOptions,
) -> Result<GlmFit> {
    let fit = irls(y, design, link, weights, options)?;
    if link == LinkFunction::Logit {
        let n_pos = positive_rows(y.len(), weights);
        if fit.boundary_fits == n_pos || (!fit.converged && fit.boundary_fits > 0) {
            return Err(Error::Separation);
        }
    }
    if !fit.converged {
        return Err(Error::NonConvergence {
            iterations: fit.iterations,
        });
    }
    Ok(fit)
}

fn positive_rows(n: usize, weights: Option<&[f64]>) -> usize {
    weights.map_or(n, |w| w.iter().filter(|&&v| v > 0.0).count())
}

/// Runs IRLS to convergence or `max_iter` and reports the final state
/// without judging separation or convergence.
pub(crate) fn irls(
    y: &[f64],
    design: &DMatrix<f64>,
    link: LinkFunction,
    weights: Option<&[f64]>,
    options: GlmOptions,
) -> Result<GlmFit> {
    let n = design.nrows();
    let k = design.ncols();
    if y.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: y.len(),
        });
    }
    let prior: Vec<f64> = match weights {
        Some(w) => {
            if w.len() != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    found: w.len(),
                });
            }
            if w.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
                return Err(Error::InvalidDataset(
                    "weights must be finite and non-negative".into(),
                ));
            }
            w.to_vec()
        }
        None => vec![1.0; n],
    };
    let rows: Vec<usize> = (0..n).filter(|&i| prior[i] > 0.0).collect();
    if rows.is_empty() {
        return Err(Error::InvalidDataset("all weights are zero".into()));
    }
    if let Some(&i) = rows.iter().find(|&&i| !link.check_outcome(y[i])) {
        return Err(Error::InvalidDataset(format!(
            "outcome {} is outside the support of the {} family",
            y[i],
            link.name()
        )));
    }
    let x = design.select_rows(rows.iter());
    let yv: Vec<f64> = rows.iter().map(|&i| y[i]).collect();
    let w: Vec<f64> = rows.iter().map(|&i| prior[i]).collect();
    check_rank(&x)?;
    let m = rows.len();

    let deviance = |mu: &[f64]| -> f64 {
        (0..m).map(|i| w[i] * link.unit_deviance(yv[i], mu[i])).sum()
    };

    let mut mu: Vec<f64> = yv.iter().map(|&v| link.initial_mean(v)).collect();
    let mut eta: Vec<f64> = mu.iter().map(|&v| link.link(v)).collect();
    let mut dev_old = deviance(&mu);
    let mut beta_old: Option<DVector<f64>> = None;
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    let mut beta = DVector::zeros(k);

    for iter in 1..=options.max_iter {
        iterations = iter;
        let mut sw = Vec::with_capacity(m);
        let mut z = Vec::with_capacity(m);
        for i in 0..m {
            let v = link.variance(mu[i]).max(VARIANCE_FLOOR);
            sw.push((w[i] * v).sqrt());
            z.push(eta[i] + (yv[i] - mu[i]) / v);
        }
        let mut candidate = weighted_least_squares(&x, &sw, &z)?;
        let mut eta_new = linear_predictor(&x, &candidate);
        let mut mu_new: Vec<f64> = eta_new.iter().map(|&e| link.inverse(e)).collect();
        let mut dev_new = deviance(&mu_new);

        if let Some(prev) = &beta_old {
            let mut halvings = 0;
            while !dev_new.is_finite() || dev_new > dev_old * (1.0 + 1e-12) + 1e-300 {
                if halvings == options.max_halvings {
                    break;
                }
                halvings += 1;
                candidate = (&candidate + prev) * 0.5;
                eta_new = linear_predictor(&x, &candidate);
                mu_new = eta_new.iter().map(|&e| link.inverse(e)).collect();
                dev_new = deviance(&mu_new);
            }
            if !dev_new.is_finite() || dev_new > dev_old * (1.0 + 1e-12) + 1e-300 {
                // step-halving exhausted; keep the previous iterate
                break;
            }
        } else if !dev_new.is_finite() {
            return Err(Error::NonConvergence { iterations: iter });
        }

        let change = (dev_new - dev_old).abs();
        beta = candidate;
        eta = eta_new;
        mu = mu_new;
        trace.push(dev_new);
        let done = beta_old.is_some()
            && (change < options.abs_tol || change / dev_new.abs().max(1e-300) < options.rel_tol);
        dev_old = dev_new;
        beta_old = Some(beta.clone());
        if done {
            converged = true;
            break;
        }
    }

    // information matrix at the solution
    let mut xtwx = DMatrix::zeros(k, k);
    for i in 0..m {
        let wi = w[i] * link.variance(mu[i]).max(VARIANCE_FLOOR);
        let row = x.row(i);
        for a in 0..k {
            let ra = row[a] * wi;
            for b in 0..=a {
                xtwx[(a, b)] += ra * row[b];
            }
        }
    }
    for a in 0..k {
        for b in 0..a {
            xtwx[(b, a)] = xtwx[(a, b)];
        }
    }
    let unscaled_covariance = xtwx
        .clone()
        .cholesky()
        .map(|c| c.inverse())
        .or_else(|| xtwx.try_inverse())
        .unwrap_or_else(|| DMatrix::from_element(k, k, f64::NAN));

    let dispersion = match link {
        LinkFunction::Identity if m > k => dev_old / (m - k) as f64,
        LinkFunction::Identity => f64::NAN,
        _ => 1.0,
    };
    let boundary_fits = if link == LinkFunction::Logit {
        mu.iter().filter(|&&p| p.min(1.0 - p) < BOUNDARY_TOL).count()
    } else {
        0
    };
    let has_intercept =
        (0..k).any(|j| design.column(j).iter().all(|&v| v == 1.0));

    let mut fitted = vec![f64::NAN; n];
    let full_eta = linear_predictor(design, &beta);
    for i in 0..n {
        fitted[i] = link.inverse(full_eta[i]);
    }

    Ok(GlmFit {
        link,
        coefficients: beta,
        converged,
        iterations,
        deviance: dev_old,
        deviance_trace: trace,
        fitted,
        unscaled_covariance,
        dispersion,
        has_intercept,
        boundary_fits,
    })
}

fn linear_predictor(x: &DMatrix<f64>, beta: &DVector<f64>) -> Vec<f64> {
    (x * beta).iter().copied().collect()
}

/// Solves `min || diag(sw) (X b - z) ||` by Householder QR.
fn weighted_least_squares(x: &DMatrix<f64>, sw: &[f64], z: &[f64]) -> Result<DVector<f64>> {
    let k = x.ncols();
    let mut a = x.clone();
    for (i, &s) in sw.iter().enumerate() {
        a.row_mut(i).scale_mut(s);
    }
    let b = DVector::from_iterator(z.len(), z.iter().zip(sw).map(|(zi, s)| zi * s));
    let qr = a.qr();
    let rhs = qr.q().tr_mul(&b);
    let r = qr.r();
    r.solve_upper_triangular(&rhs)
        .filter(|beta| beta.iter().all(|v| v.is_finite()))
        .ok_or(Error::RankDeficientDesign {
            rank: (0..k).filter(|&j| r[(j, j)].abs() > 0.0).count(),
            columns: k,
        })
}

/// Fails when the columns of `x` are linearly dependent. Columns are
/// normalized before the QR pivots are inspected.
pub fn check_rank(x: &DMatrix<f64>) -> Result<()> {
    let k = x.ncols();
    let n = x.nrows();
    let mut scaled = x.clone();
    let mut zero_cols = 0;
    for j in 0..k {
        let norm = scaled.column(j).norm();
        if norm > 0.0 {
            scaled.column_mut(j).unscale_mut(norm);
        } else {
            zero_cols += 1;
        }
    }
    if n < k || zero_cols > 0 {
        return Err(Error::RankDeficientDesign {
            rank: n.min(k).saturating_sub(zero_cols),
            columns: k,
        });
    }
    let r = scaled.qr().r();
    let rank = (0..k).filter(|&j| r[(j, j)].abs() > RANK_TOL).count();
    if rank < k {
        return Err(Error::RankDeficientDesign { rank, columns: k });
    }
    Ok(())
}

/// `g^{-1}(design_rows * coefficients)` for each row.
pub fn predict_mean(fit: &GlmFit, design_rows: &DMatrix<f64>) -> Result<Vec<f64>> {
    if design_rows.ncols() != fit.coefficients.len() {
        return Err(Error::DimensionMismatch {
            expected: fit.coefficients.len(),
            found: design_rows.ncols(),
        });
    }
    Ok(linear_predictor(design_rows, &fit.coefficients)
        .into_iter()
        .map(|e| fit.link.inverse(e))
        .collect())
}

/// A GLM fit tied to the formula that produced its design.
#[derive(Debug, Clone)]
pub struct WorkingModelFit {
    pub formula: ModelFormula,
    pub glm: GlmFit,
}

impl WorkingModelFit {
    /// Fits the working model of the outcome on `rows` of `data`.
    pub fn fit(
        data: &TrialDataset,
        rows: &[usize],
        formula: &ModelFormula,
        link: LinkFunction,
        weights: Option<&[f64]>,
    ) -> Result<Self> {
        let y: Vec<f64> = rows.iter().map(|&i| data.outcome()[i]).collect();
        if y.iter().any(|v| v.is_nan()) {
            return Err(Error::UnhandledMissing {
                what: "outcomes".into(),
            });
        }
        Self::fit_response(data, rows, &y, formula, link, weights)
    }

    /// Fits an arbitrary response (for example the arm or a completeness
    /// indicator) on `rows` of `data`.
    pub fn fit_response(
        data: &TrialDataset,
        rows: &[usize],
        response: &[f64],
        formula: &ModelFormula,
        link: LinkFunction,
        weights: Option<&[f64]>,
    ) -> Result<Self> {
        let design = formula.design_rows(data, rows)?;
        let glm = fit_glm(response, &design, link, weights)?;
        Ok(Self {
            formula: formula.clone(),
            glm,
        })
    }

    /// Predicted means for every patient in `data`.
    pub fn predict(&self, data: &TrialDataset) -> Result<Vec<f64>> {
        predict_mean(&self.glm, &self.formula.design(data)?)
    }

    pub fn n_params_excluding_intercept(&self) -> usize {
        self.formula.n_terms()
    }
}
