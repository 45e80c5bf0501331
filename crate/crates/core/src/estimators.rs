//! Estimators of the arm-specific marginal means `E(Y^1)` and `E(Y^0)`.
//!
//! Every estimator returns [`ArmMeans`]: the two plug-in means, the
//! empirical randomization probability, the per-patient predictions under
//! each arm and the per-arm influence contributions consumed by
//! [`crate::inference`].
//!
//! The augmented form used throughout is
//!
//! ```text
//! mu1 = n^-1 sum [ Z Y / pi - (Z - pi) / pi * h1(X) ]
//! mu0 = n^-1 sum [ (1-Z) Y / (1-pi) + (Z - pi) / (1-pi) * h0(X) ]
//! ```
//!
//! whose difference is the general covariate-adjusted estimator of the
//! risk difference. Choosing `h1 = h0 = 0` gives the difference in means,
//! pooled least-squares predictions give ANCOVA, fully interacted
//! least-squares predictions give ANHECOVA and canonical-link GLM
//! predictions give standardization.

use std::collections::BTreeMap;
use std::fmt;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::{ModelFormula, Scale, TrialDataset};
use crate::error::{Arm, Error, Result};
use crate::glm::{fit_glm, predict_mean, GlmFit, LinkFunction, WorkingModelFit};
use crate::stats::mean;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Unadjusted,
    StandardizationSeparate,
    StandardizationPooled,
    Ancova,
    Anhecova,
    Ipw,
    AipwGeneral,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Unadjusted => "unadjusted",
            Method::StandardizationSeparate => "standardization_separate",
            Method::StandardizationPooled => "standardization_pooled",
            Method::Ancova => "ancova",
            Method::Anhecova => "anhecova",
            Method::Ipw => "ipw",
            Method::AipwGeneral => "aipw_general",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Estimator choice together with its working model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorConfig {
    pub method: Method,
    #[serde(default)]
    pub formula: ModelFormula,
    #[serde(default = "default_link")]
    pub link: LinkFunction,
}

fn default_link() -> LinkFunction {
    LinkFunction::Identity
}

impl EstimatorConfig {
    /// Builds a config, forcing the identity link for ANCOVA/ANHECOVA.
    pub fn new(method: Method, formula: ModelFormula, link: LinkFunction) -> Result<Self> {
        let link = match method {
            Method::Ancova | Method::Anhecova => LinkFunction::Identity,
            _ => link,
        };
        let config = Self {
            method,
            formula,
            link,
        };
        config.check()?;
        Ok(config)
    }

    pub fn unadjusted() -> Self {
        Self {
            method: Method::Unadjusted,
            formula: ModelFormula::intercept_only(),
            link: LinkFunction::Identity,
        }
    }

    pub fn check(&self) -> Result<()> {
        match self.method {
            Method::Ancova | Method::Anhecova if self.link != LinkFunction::Identity => {
                Err(Error::config(
                    "link",
                    format!("{} requires the identity link", self.method),
                ))
            }
            Method::Unadjusted => Ok(()),
            _ => self.formula.require_intercept(),
        }
    }

    /// Fitted non-intercept parameters per arm, as used by the small-sample
    /// correction.
    pub fn params_per_arm(&self) -> usize {
        match self.method {
            Method::Unadjusted => 0,
            Method::StandardizationPooled | Method::Ancova => self.formula.n_terms() + 1,
            _ => self.formula.n_terms(),
        }
    }
}

/// Conditional (model) coefficient with its model-based standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CoefficientEstimate {
    pub estimate: f64,
    pub std_error: f64,
}

/// Estimated marginal means under each arm plus what inference needs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ArmMeans {
    pub mu1_hat: f64,
    pub mu0_hat: f64,
    pub pi_hat: f64,
    /// Predictions `h1(X_i)` for every patient.
    #[serde(skip)]
    pub h1_predictions: Vec<f64>,
    /// Predictions `h0(X_i)` for every patient.
    #[serde(skip)]
    pub h0_predictions: Vec<f64>,
    /// Centered per-patient influence contributions of `mu1_hat`.
    #[serde(skip)]
    pub influence1: Vec<f64>,
    /// Centered per-patient influence contributions of `mu0_hat`.
    #[serde(skip)]
    pub influence0: Vec<f64>,
    /// Patients used to fit the treated-arm model.
    pub n1: usize,
    /// Patients used to fit the control-arm model.
    pub n0: usize,
    /// Non-intercept parameters of the treated-arm model.
    pub p1: usize,
    /// Non-intercept parameters of the control-arm model.
    pub p0: usize,
    /// Treatment coefficient of a pooled working model, when there is one.
    pub conditional: Option<CoefficientEstimate>,
    pub diagnostics: BTreeMap<String, Value>,
}

impl ArmMeans {
    pub fn n(&self) -> usize {
        self.influence1.len()
    }

    /// Marginal contrast on the requested scale.
    pub fn contrast(&self, scale: Scale) -> Result<f64> {
        contrast(self, scale)
    }

    fn note(&mut self, key: &str, value: impl Into<Value>) {
        self.diagnostics.insert(key.to_string(), value.into());
    }
}

/// Augmented influence contributions `Z/pi (Y - h1) + h1 - mu1` and the
/// control-arm analogue.
fn augmented_influence(
    data: &TrialDataset,
    pi: f64,
    h1: &[f64],
    h0: &[f64],
    mu1: f64,
    mu0: f64,
) -> (Vec<f64>, Vec<f64>) {
    let y = data.outcome();
    let z = data.arm();
    let mut phi1 = Vec::with_capacity(y.len());
    let mut phi0 = Vec::with_capacity(y.len());
    for i in 0..y.len() {
        let zi = f64::from(z[i]);
        phi1.push(zi / pi * (y[i] - h1[i]) + h1[i] - mu1);
        phi0.push((1.0 - zi) / (1.0 - pi) * (y[i] - h0[i]) + h0[i] - mu0);
    }
    (phi1, phi0)
}

pub(crate) fn check_pi(pi: f64) -> Result<()> {
    if pi > 0.0 && pi < 1.0 {
        Ok(())
    } else {
        Err(Error::DegenerateRandomization { pi_hat: pi })
    }
}

/// Difference in arm means.
///
/// The stored predictions are the arm means themselves (the intercept-only
/// working model), which makes the influence contributions the usual
/// two-sample ones.
pub fn estimate_unadjusted(data: &TrialDataset) -> Result<ArmMeans> {
    data.require_complete()?;
    let n1 = data.n_treated();
    let n0 = data.n_control();
    if n1 == 0 {
        return Err(Error::EmptyArm { arm: Arm::Treated });
    }
    if n0 == 0 {
        return Err(Error::EmptyArm { arm: Arm::Control });
    }
    let (mut s1, mut s0) = (0.0, 0.0);
    for (y, &z) in data.outcome().iter().zip(data.arm()) {
        if z == 1 {
            s1 += y;
        } else {
            s0 += y;
        }
    }
    let mu1 = s1 / n1 as f64;
    let mu0 = s0 / n0 as f64;
    let n = data.n();
    let pi = data.pi_hat();
    let h1 = vec![mu1; n];
    let h0 = vec![mu0; n];
    let (influence1, influence0) = augmented_influence(data, pi, &h1, &h0, mu1, mu0);
    Ok(ArmMeans {
        mu1_hat: mu1,
        mu0_hat: mu0,
        pi_hat: pi,
        h1_predictions: h1,
        h0_predictions: h0,
        influence1,
        influence0,
        n1,
        n0,
        p1: 0,
        p0: 0,
        conditional: None,
        diagnostics: BTreeMap::new(),
    })
}

/// Augmented estimator for arbitrary prediction vectors `h1`, `h0`.
pub fn estimate_general_form(data: &TrialDataset, h1: &[f64], h0: &[f64]) -> Result<ArmMeans> {
    data.require_complete()?;
    let n = data.n();
    for h in [h1, h0] {
        if h.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                found: h.len(),
            });
        }
    }
    let pi = data.pi_hat();
    check_pi(pi)?;
    let y = data.outcome();
    let z = data.arm();
    let (mut s1, mut s0) = (0.0, 0.0);
    for i in 0..n {
        let zi = f64::from(z[i]);
        s1 += zi * y[i] / pi - (zi - pi) / pi * h1[i];
        s0 += (1.0 - zi) * y[i] / (1.0 - pi) + (zi - pi) / (1.0 - pi) * h0[i];
    }
    let mu1 = s1 / n as f64;
    let mu0 = s0 / n as f64;
    let (influence1, influence0) = augmented_influence(data, pi, h1, h0, mu1, mu0);
    Ok(ArmMeans {
        mu1_hat: mu1,
        mu0_hat: mu0,
        pi_hat: pi,
        h1_predictions: h1.to_vec(),
        h0_predictions: h0.to_vec(),
        influence1,
        influence0,
        n1: data.n_treated(),
        n0: data.n_control(),
        p1: 0,
        p0: 0,
        conditional: None,
        diagnostics: BTreeMap::new(),
    })
}

pub(crate) fn fit_notes(prefix: &str, fit: &GlmFit, out: &mut BTreeMap<String, Value>) {
    out.insert(format!("{prefix}_converged"), fit.converged.into());
    out.insert(format!("{prefix}_iterations"), fit.iterations.into());
    if fit.boundary_fits > 0 {
        out.insert(format!("{prefix}_boundary_fits"), fit.boundary_fits.into());
    }
}

/// Per-arm working models fitted on each arm separately, predicted for all
/// patients. Shared by standardization and the augmented estimator.
pub(crate) struct SeparateFits {
    pub treated: WorkingModelFit,
    pub control: WorkingModelFit,
    pub h1: Vec<f64>,
    pub h0: Vec<f64>,
}

pub(crate) fn fit_separate(
    data: &TrialDataset,
    formula: &ModelFormula,
    link: LinkFunction,
) -> Result<SeparateFits> {
    formula.require_intercept()?;
    let design = formula.design(data)?;
    let fit_arm = |arm: Arm| -> Result<(WorkingModelFit, Vec<f64>)> {
        let rows = data.arm_rows(arm);
        let fit = WorkingModelFit::fit(data, &rows, formula, link, None).map_err(|e| e.in_arm(arm))?;
        let h = predict_mean(&fit.glm, &design)?;
        Ok((fit, h))
    };
    let (treated, h1) = fit_arm(Arm::Treated)?;
    let (control, h0) = fit_arm(Arm::Control)?;
    Ok(SeparateFits {
        treated,
        control,
        h1,
        h0,
    })
}

/// Standardization (G-computation) with one working model per arm.
///
/// The treated-arm model is fitted on treated patients only and averaged
/// over all `n` patients; likewise for the control arm.
pub fn estimate_standardization_separate(
    data: &TrialDataset,
    formula: &ModelFormula,
    link: LinkFunction,
) -> Result<ArmMeans> {
    data.require_complete()?;
    let fits = fit_separate(data, formula, link)?;
    let pi = data.pi_hat();
    check_pi(pi)?;
    let mu1 = mean(&fits.h1);
    let mu0 = mean(&fits.h0);
    let (influence1, influence0) = augmented_influence(data, pi, &fits.h1, &fits.h0, mu1, mu0);
    let mut diagnostics = BTreeMap::new();
    fit_notes("treated_model", &fits.treated.glm, &mut diagnostics);
    fit_notes("control_model", &fits.control.glm, &mut diagnostics);
    Ok(ArmMeans {
        mu1_hat: mu1,
        mu0_hat: mu0,
        pi_hat: pi,
        h1_predictions: fits.h1,
        h0_predictions: fits.h0,
        influence1,
        influence0,
        n1: data.n_treated(),
        n0: data.n_control(),
        p1: formula.n_terms(),
        p0: formula.n_terms(),
        conditional: None,
        diagnostics,
    })
}

/// Augmented estimator with per-arm canonical GLM predictions. Coincides
/// with separate-model standardization because of the score equations.
pub fn estimate_aipw(
    data: &TrialDataset,
    formula: &ModelFormula,
    link: LinkFunction,
) -> Result<ArmMeans> {
    data.require_complete()?;
    let fits = fit_separate(data, formula, link)?;
    let mut out = estimate_general_form(data, &fits.h1, &fits.h0)?;
    out.p1 = formula.n_terms();
    out.p0 = formula.n_terms();
    fit_notes("treated_model", &fits.treated.glm, &mut out.diagnostics);
    fit_notes("control_model", &fits.control.glm, &mut out.diagnostics);
    Ok(out)
}

/// Design `[1, Z, X-terms]` and its counterfactual versions with `Z` set to
/// 1 and to 0.
fn pooled_designs(
    data: &TrialDataset,
    formula: &ModelFormula,
) -> Result<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)> {
    formula.require_intercept()?;
    let base = formula.design(data)?;
    let n = data.n();
    let k = base.ncols();
    let build = |z: &dyn Fn(usize) -> f64| {
        DMatrix::from_fn(n, k + 1, |i, j| match j {
            0 => base[(i, 0)],
            1 => z(i),
            _ => base[(i, j - 1)],
        })
    };
    let arm = data.arm();
    let observed = build(&|i| f64::from(arm[i]));
    let all_treated = build(&|_| 1.0);
    let all_control = build(&|_| 0.0);
    Ok((observed, all_treated, all_control))
}

/// Standardization from a single working model of `Y` on `(Z, X)` without
/// interactions, fitted on all patients.
pub fn estimate_standardization_pooled(
    data: &TrialDataset,
    formula: &ModelFormula,
    link: LinkFunction,
) -> Result<ArmMeans> {
    data.require_complete()?;
    let (observed, treated, control) = pooled_designs(data, formula)?;
    let fit = fit_glm(data.outcome(), &observed, link, None)?;
    let h1 = predict_mean(&fit, &treated)?;
    let h0 = predict_mean(&fit, &control)?;
    let pi = data.pi_hat();
    check_pi(pi)?;
    let mu1 = mean(&h1);
    let mu0 = mean(&h0);
    let (influence1, influence0) = augmented_influence(data, pi, &h1, &h0, mu1, mu0);
    let p = formula.n_terms() + 1;
    let mut diagnostics = BTreeMap::new();
    fit_notes("pooled_model", &fit, &mut diagnostics);
    Ok(ArmMeans {
        mu1_hat: mu1,
        mu0_hat: mu0,
        pi_hat: pi,
        h1_predictions: h1,
        h0_predictions: h0,
        influence1,
        influence0,
        n1: data.n_treated(),
        n0: data.n_control(),
        p1: p,
        p0: p,
        conditional: Some(CoefficientEstimate {
            estimate: fit.coefficients[1],
            std_error: fit.std_error(1),
        }),
        diagnostics,
    })
}

/// Least squares of `Y` on `(1, Z, X)`; the contrast is the `Z` coefficient.
pub fn estimate_ancova(data: &TrialDataset, formula: &ModelFormula) -> Result<ArmMeans> {
    estimate_standardization_pooled(data, formula, LinkFunction::Identity)
}

/// Least squares of `Y` on `(1, Z, Xc, Z*Xc)` with covariate terms centered
/// at their full-sample means; the contrast is the `Z` coefficient.
pub fn estimate_anhecova(data: &TrialDataset, formula: &ModelFormula) -> Result<ArmMeans> {
    data.require_complete()?;
    formula.require_intercept()?;
    let base = formula.design(data)?;
    let n = data.n();
    let p = formula.n_terms();
    let centers: Vec<f64> = (1..=p).map(|j| base.column(j).mean()).collect();
    let arm = data.arm();
    let build = |z: &dyn Fn(usize) -> f64| {
        DMatrix::from_fn(n, 2 + 2 * p, |i, j| {
            if j == 0 {
                1.0
            } else if j == 1 {
                z(i)
            } else if j < 2 + p {
                base[(i, j - 1)] - centers[j - 2]
            } else {
                z(i) * (base[(i, j - 1 - p)] - centers[j - 2 - p])
            }
        })
    };
    let observed = build(&|i| f64::from(arm[i]));
    let fit = fit_glm(data.outcome(), &observed, LinkFunction::Identity, None)?;
    let h1 = predict_mean(&fit, &build(&|_| 1.0))?;
    let h0 = predict_mean(&fit, &build(&|_| 0.0))?;
    let pi = data.pi_hat();
    check_pi(pi)?;
    let mu1 = mean(&h1);
    let mu0 = mean(&h0);
    let (influence1, influence0) = augmented_influence(data, pi, &h1, &h0, mu1, mu0);
    let mut diagnostics = BTreeMap::new();
    diagnostics.insert("centered_at".into(), Value::from(centers));
    Ok(ArmMeans {
        mu1_hat: mu1,
        mu0_hat: mu0,
        pi_hat: pi,
        h1_predictions: h1,
        h0_predictions: h0,
        influence1,
        influence0,
        n1: data.n_treated(),
        n0: data.n_control(),
        p1: p,
        p0: p,
        conditional: Some(CoefficientEstimate {
            estimate: fit.coefficients[1],
            std_error: fit.std_error(1),
        }),
        diagnostics,
    })
}

/// Inverse probability weighting with a logistic treatment model and
/// normalized (Hajek) weights.
///
/// Influence contributions account for the estimated propensity through
/// the stacked estimating equations of the logistic score and the two
/// weighted means.
pub fn estimate_ipw(data: &TrialDataset, formula: &ModelFormula) -> Result<ArmMeans> {
    data.require_complete()?;
    formula.require_intercept()?;
    let design = formula.design(data)?;
    let z: Vec<f64> = data.arm().iter().map(|&a| f64::from(a)).collect();
    let fit = fit_glm(&z, &design, LinkFunction::Logit, None).map_err(|e| Error::TreatmentModel {
        source: Box::new(e),
    })?;
    let e = &fit.fitted;
    let y = data.outcome();
    let n = data.n();
    let nf = n as f64;

    let (mut num1, mut den1, mut num0, mut den0) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..n {
        num1 += z[i] * y[i] / e[i];
        den1 += z[i] / e[i];
        num0 += (1.0 - z[i]) * y[i] / (1.0 - e[i]);
        den0 += (1.0 - z[i]) / (1.0 - e[i]);
    }
    let mu1 = num1 / den1;
    let mu0 = num0 / den0;

    // Stacked M-estimation: psi1 = Z (Y - mu1) / e, psi0 = (1-Z)(Y - mu0)/(1-e),
    // logistic score S = (Z - e) x with information I = mean e(1-e) x x'.
    let k = design.ncols();
    let mut d1 = nalgebra::DVector::zeros(k);
    let mut d0 = nalgebra::DVector::zeros(k);
    for i in 0..n {
        let x = design.row(i).transpose();
        d1 -= &x * (z[i] * (y[i] - mu1) * (1.0 - e[i]) / e[i]);
        d0 += &x * ((1.0 - z[i]) * (y[i] - mu0) * e[i] / (1.0 - e[i]));
    }
    d1 /= nf;
    d0 /= nf;
    let info_inv = &fit.unscaled_covariance * nf;
    let g1 = &info_inv * d1;
    let g0 = &info_inv * d0;
    let c1 = den1 / nf;
    let c0 = den0 / nf;
    let mut influence1 = Vec::with_capacity(n);
    let mut influence0 = Vec::with_capacity(n);
    for i in 0..n {
        let x = design.row(i);
        let score = z[i] - e[i];
        let psi1 = z[i] * (y[i] - mu1) / e[i];
        let psi0 = (1.0 - z[i]) * (y[i] - mu0) / (1.0 - e[i]);
        influence1.push((psi1 + score * x.dot(&g1.transpose())) / c1);
        influence0.push((psi0 + score * x.dot(&g0.transpose())) / c0);
    }

    let mut diagnostics = BTreeMap::new();
    fit_notes("treatment_model", &fit, &mut diagnostics);
    diagnostics.insert("weight_sum_treated".into(), den1.into());
    diagnostics.insert("weight_sum_control".into(), den0.into());
    Ok(ArmMeans {
        mu1_hat: mu1,
        mu0_hat: mu0,
        pi_hat: data.pi_hat(),
        h1_predictions: vec![mu1; n],
        h0_predictions: vec![mu0; n],
        influence1,
        influence0,
        n1: data.n_treated(),
        n0: data.n_control(),
        p1: formula.n_terms(),
        p0: formula.n_terms(),
        conditional: None,
        diagnostics,
    })
}

/// Runs the configured estimator.
pub fn estimate(data: &TrialDataset, config: &EstimatorConfig) -> Result<ArmMeans> {
    config.check()?;
    let f = &config.formula;
    let mut out = match config.method {
        Method::Unadjusted => estimate_unadjusted(data),
        Method::StandardizationSeparate => estimate_standardization_separate(data, f, config.link),
        Method::StandardizationPooled => estimate_standardization_pooled(data, f, config.link),
        Method::Ancova => estimate_ancova(data, f),
        Method::Anhecova => estimate_anhecova(data, f),
        Method::Ipw => estimate_ipw(data, f),
        Method::AipwGeneral => estimate_aipw(data, f, config.link),
    }?;
    out.note("method", config.method.name());
    Ok(out)
}

/// Marginal contrast of the two arm means.
pub fn contrast(means: &ArmMeans, scale: Scale) -> Result<f64> {
    contrast_of(means.mu1_hat, means.mu0_hat, scale)
}

pub fn contrast_of(m1: f64, m0: f64, scale: Scale) -> Result<f64> {
    match scale {
        Scale::Difference => Ok(m1 - m0),
        Scale::Ratio => {
            if m0 <= 0.0 || m1 < 0.0 {
                return Err(Error::BoundaryEstimate {
                    detail: format!("mu1 = {m1}, mu0 = {m0}"),
                });
            }
            Ok(m1 / m0)
        }
        Scale::OddsRatio => {
            let inside = |m: f64| m > 0.0 && m < 1.0;
            if !inside(m1) || !inside(m0) {
                return Err(Error::BoundaryEstimate {
                    detail: format!("mu1 = {m1}, mu0 = {m0}"),
                });
            }
            Ok((m1 / (1.0 - m1)) / (m0 / (1.0 - m0)))
        }
    }
}
