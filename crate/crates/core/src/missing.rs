//! Missing baseline covariates and missing outcomes.
//!
//! Covariates are handled by single imputation or missing indicators, which
//! keeps the adjusted estimators valid because randomization makes any
//! function of baseline data admissible. Missing outcomes need a model:
//! either per-arm standardization under missing-at-random, or the same
//! with inverse-probability-of-observation weights.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::{ModelFormula, Term, TrialDataset};
use crate::error::{Arm, Error, Result};
use crate::estimators::{
    check_pi, estimate, estimate_standardization_separate, fit_notes, ArmMeans, EstimatorConfig,
    Method,
};
use crate::glm::{predict_mean, GlmFit, LinkFunction, WorkingModelFit};
use crate::stats::mean;

/// Missingness fraction above which a warning is attached.
pub const HIGH_MISSINGNESS: f64 = 0.4;
/// Floor applied to estimated completeness probabilities.
pub const PROBABILITY_FLOOR: f64 = 0.01;
/// Largest tolerated share of floored probabilities within an arm.
pub const MAX_CLAMPED_SHARE: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovariateStrategy {
    /// Fill with 0 and add a missingness indicator.
    #[default]
    MissingIndicator,
    /// Fill with the observed mean of the column.
    MeanImpute,
    /// Fill with the observed mean and add a missingness indicator.
    IndicatorPlusMean,
    /// Drop the columns listed in `exclude_columns`.
    ExcludeColumn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeStrategy {
    /// Refuse to analyse data with missing outcomes.
    #[default]
    CompleteCaseError,
    MarStandardization,
    DrWeighted,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImputationPlan {
    #[serde(default)]
    pub covariate_strategy: CovariateStrategy,
    #[serde(default)]
    pub outcome_strategy: OutcomeStrategy,
    /// Model for the probability of observing the outcome. Defaults to the
    /// outcome working model.
    #[serde(default)]
    pub missingness_formula: Option<ModelFormula>,
    #[serde(default)]
    pub exclude_columns: Vec<String>,
}

/// What was done to one covariate column.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ColumnAction {
    pub column: String,
    pub action: &'static str,
    pub missing: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fill_value: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub indicator: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct ImputationRecord {
    pub columns: Vec<ColumnAction>,
    pub warnings: Vec<String>,
}

impl ImputationRecord {
    pub fn indicators(&self) -> impl Iterator<Item = &str> {
        self.columns.iter().filter_map(|c| c.indicator.as_deref())
    }

    pub fn excluded(&self) -> impl Iterator<Item = &str> {
        self.columns
            .iter()
            .filter(|c| c.action == "excluded")
            .map(|c| c.column.as_str())
    }

    /// Working-model formula adapted to the imputed data: terms using
    /// excluded columns are dropped and each indicator enters linearly when
    /// its column is used.
    pub fn adapt_formula(&self, formula: &ModelFormula) -> ModelFormula {
        let excluded: Vec<&str> = self.excluded().collect();
        let mut terms: Vec<Term> = formula
            .terms
            .iter()
            .filter(|t| !t.columns().iter().any(|c| excluded.contains(c)))
            .cloned()
            .collect();
        let used = formula.columns_used();
        for c in &self.columns {
            if let Some(ind) = &c.indicator {
                let term = Term::linear(ind);
                if used.contains(&c.column.as_str()) && !terms.contains(&term) {
                    terms.push(term);
                }
            }
        }
        ModelFormula::new(terms, formula.include_intercept)
    }
}

fn indicator_name(base: &str, taken: &[String]) -> String {
    let mut name = format!("{base}_missing");
    while taken.contains(&name) {
        name.push('_');
    }
    name
}

/// Replaces missing covariate values according to `plan`. Complete columns
/// are left untouched.
pub fn impute_covariates(
    data: &TrialDataset,
    plan: &ImputationPlan,
) -> Result<(TrialDataset, ImputationRecord)> {
    for c in &plan.exclude_columns {
        if data.column_index(c).is_none() {
            return Err(Error::MissingColumn { column: c.clone() });
        }
    }
    let n = data.n();
    let x = data.covariates();
    let mask = data.covariate_missing();
    let names = data.covariate_names();
    let mut record = ImputationRecord::default();
    let mut columns: Vec<Vec<f64>> = Vec::new();
    let mut out_names: Vec<String> = Vec::new();
    let mut indicators: Vec<(String, Vec<f64>)> = Vec::new();

    for (j, name) in names.iter().enumerate() {
        let col: Vec<f64> = x.column(j).iter().copied().collect();
        let missing = (0..n).filter(|&i| mask[(i, j)]).count();
        let excluded = plan.covariate_strategy == CovariateStrategy::ExcludeColumn
            && plan.exclude_columns.contains(name);
        if excluded {
            record.columns.push(ColumnAction {
                column: name.clone(),
                action: "excluded",
                missing,
                fill_value: None,
                indicator: None,
            });
            continue;
        }
        if missing == 0 || plan.covariate_strategy == CovariateStrategy::ExcludeColumn {
            columns.push(col);
            out_names.push(name.clone());
            continue;
        }
        if missing == n {
            return Err(Error::AllMissingColumn {
                column: name.clone(),
            });
        }
        let rate = missing as f64 / n as f64;
        if rate > HIGH_MISSINGNESS {
            record.warnings.push(format!(
                "`{name}` is missing for {:.0}% of patients",
                100.0 * rate
            ));
        }
        let observed: Vec<f64> = (0..n).filter(|&i| !mask[(i, j)]).map(|i| col[i]).collect();
        let (fill, with_indicator, action) = match plan.covariate_strategy {
            CovariateStrategy::MissingIndicator => (0.0, true, "indicator"),
            CovariateStrategy::MeanImpute => (mean(&observed), false, "mean_imputed"),
            CovariateStrategy::IndicatorPlusMean => (mean(&observed), true, "indicator_plus_mean"),
            CovariateStrategy::ExcludeColumn => unreachable!(),
        };
        let filled = (0..n).map(|i| if mask[(i, j)] { fill } else { col[i] }).collect();
        columns.push(filled);
        out_names.push(name.clone());
        let indicator = with_indicator.then(|| {
            let mut taken: Vec<String> = names.to_vec();
            taken.extend(indicators.iter().map(|(s, _)| s.clone()));
            let ind = indicator_name(name, &taken);
            let values = (0..n).map(|i| f64::from(u8::from(mask[(i, j)]))).collect();
            indicators.push((ind.clone(), values));
            ind
        });
        record.columns.push(ColumnAction {
            column: name.clone(),
            action,
            missing,
            fill_value: Some(fill),
            indicator,
        });
    }
    for (name, values) in indicators {
        out_names.push(name);
        columns.push(values);
    }
    let matrix = DMatrix::from_fn(n, columns.len(), |i, j| columns[j][i]);
    let imputed = data.with_covariates(matrix, out_names)?;
    Ok((imputed, record))
}

/// One arm's working model fitted on its complete cases, with predictions
/// for every patient and sandwich-based influence contributions that
/// account for the estimated coefficients.
struct ArmModel {
    fit: GlmFit,
    h: Vec<f64>,
    mu: f64,
    influence: Vec<f64>,
    complete: usize,
}

fn fit_arm_complete_cases(
    data: &TrialDataset,
    arm: Arm,
    formula: &ModelFormula,
    link: LinkFunction,
    weights: Option<&[f64]>,
) -> Result<ArmModel> {
    let missing = data.outcome_missing();
    let rows: Vec<usize> = data
        .arm_rows(arm)
        .into_iter()
        .filter(|&i| !missing[i])
        .collect();
    let required = formula.n_columns() + 1;
    if rows.len() < required {
        return Err(Error::InsufficientCompleteCases {
            arm,
            complete: rows.len(),
            required,
        });
    }
    let w: Option<Vec<f64>> = weights.map(|w| rows.iter().map(|&i| w[i]).collect());
    let fit = WorkingModelFit::fit(data, &rows, formula, link, w.as_deref())
        .map_err(|e| e.in_arm(arm))?
        .glm;
    let design = formula.design(data)?;
    let h = predict_mean(&fit, &design)?;
    let n = data.n();
    let mu = mean(&h);

    // d = mean over all patients of d mu / d beta
    let k = design.ncols();
    let mut d = DVector::zeros(k);
    for i in 0..n {
        let v = link.variance(h[i]);
        for j in 0..k {
            d[j] += v * design[(i, j)];
        }
    }
    d /= n as f64;
    let c = &fit.unscaled_covariance * d * n as f64;

    let y = data.outcome();
    let mut influence: Vec<f64> = h.iter().map(|hi| hi - mu).collect();
    for &i in &rows {
        let wi = weights.map_or(1.0, |w| w[i]);
        let lever: f64 = (0..k).map(|j| design[(i, j)] * c[j]).sum();
        influence[i] += wi * (y[i] - h[i]) * lever;
    }
    Ok(ArmModel {
        fit,
        h,
        mu,
        influence,
        complete: rows.len(),
    })
}

fn assemble(
    data: &TrialDataset,
    formula: &ModelFormula,
    treated: ArmModel,
    control: ArmModel,
    mut diagnostics: BTreeMap<String, Value>,
) -> ArmMeans {
    fit_notes("treated_model", &treated.fit, &mut diagnostics);
    fit_notes("control_model", &control.fit, &mut diagnostics);
    diagnostics.insert("complete_cases_treated".into(), treated.complete.into());
    diagnostics.insert("complete_cases_control".into(), control.complete.into());
    ArmMeans {
        mu1_hat: treated.mu,
        mu0_hat: control.mu,
        pi_hat: data.pi_hat(),
        h1_predictions: treated.h,
        h0_predictions: control.h,
        influence1: treated.influence,
        influence0: control.influence,
        n1: treated.complete,
        n0: control.complete,
        p1: formula.n_terms(),
        p0: formula.n_terms(),
        conditional: None,
        diagnostics,
    }
}

/// Per-arm standardization under missing-at-random outcomes: each arm's
/// model is fitted on its complete cases and averaged over all patients.
///
/// With no missing outcome this is separate-model standardization.
pub fn mar_standardization(
    data: &TrialDataset,
    formula: &ModelFormula,
    link: LinkFunction,
) -> Result<ArmMeans> {
    if !data.has_missing_outcome() {
        return estimate_standardization_separate(data, formula, link);
    }
    formula.require_intercept()?;
    check_pi(data.pi_hat())?;
    let treated = fit_arm_complete_cases(data, Arm::Treated, formula, link, None)?;
    let control = fit_arm_complete_cases(data, Arm::Control, formula, link, None)?;
    Ok(assemble(data, formula, treated, control, BTreeMap::new()))
}

/// Estimated probability of observing the outcome within one arm, floored
/// at [`PROBABILITY_FLOOR`]. Entries outside the arm are left at 1.
fn completeness_weights(
    data: &TrialDataset,
    arm: Arm,
    formula: &ModelFormula,
    weights: &mut [f64],
    diagnostics: &mut BTreeMap<String, Value>,
) -> Result<()> {
    let rows = data.arm_rows(arm);
    let missing = data.outcome_missing();
    let r: Vec<f64> = rows.iter().map(|&i| f64::from(u8::from(!missing[i]))).collect();
    let observed = r.iter().filter(|&&v| v == 1.0).count();
    if observed == rows.len() {
        return Ok(());
    }
    if observed == 0 {
        return Err(Error::InsufficientCompleteCases {
            arm,
            complete: 0,
            required: formula.n_columns() + 1,
        });
    }
    let fit = WorkingModelFit::fit_response(data, &rows, &r, formula, LinkFunction::Logit, None)
        .map_err(|e| e.in_arm(arm))?;
    let mut clamped = 0;
    let mut smallest = f64::INFINITY;
    for (k, &i) in rows.iter().enumerate() {
        let p = fit.glm.fitted[k];
        smallest = smallest.min(p);
        if p < PROBABILITY_FLOOR {
            clamped += 1;
        }
        weights[i] = 1.0 / p.max(PROBABILITY_FLOOR);
    }
    let label = match arm {
        Arm::Treated => "treated",
        Arm::Control => "control",
    };
    diagnostics.insert(format!("min_completeness_probability_{label}"), smallest.into());
    diagnostics.insert(format!("clamped_probabilities_{label}"), clamped.into());
    if clamped as f64 > MAX_CLAMPED_SHARE * rows.len() as f64 {
        return Err(Error::PositivityViolation {
            arm,
            clamped,
            total: rows.len(),
        });
    }
    Ok(())
}

/// Doubly robust standardization for missing outcomes: complete cases are
/// weighted by the inverse of their estimated probability of being
/// observed, estimated per arm by a logistic model on `missingness`.
///
/// Consistent when either the outcome model or the missingness model is
/// correct. With no missing outcome this is separate-model standardization.
pub fn dr_weighted_standardization(
    data: &TrialDataset,
    formula: &ModelFormula,
    link: LinkFunction,
    missingness: &ModelFormula,
) -> Result<ArmMeans> {
    if !data.has_missing_outcome() {
        return estimate_standardization_separate(data, formula, link);
    }
    formula.require_intercept()?;
    missingness.require_intercept()?;
    check_pi(data.pi_hat())?;
    let mut diagnostics = BTreeMap::new();
    let mut weights = vec![1.0; data.n()];
    completeness_weights(data, Arm::Treated, missingness, &mut weights, &mut diagnostics)?;
    completeness_weights(data, Arm::Control, missingness, &mut weights, &mut diagnostics)?;
    let treated = fit_arm_complete_cases(data, Arm::Treated, formula, link, Some(&weights))?;
    let control = fit_arm_complete_cases(data, Arm::Control, formula, link, Some(&weights))?;
    Ok(assemble(data, formula, treated, control, diagnostics))
}

/// Runs an estimator with the missing-data handling in `plan`: covariates
/// are imputed first, then missing outcomes are dispatched to the chosen
/// outcome strategy. Returns the estimate and the imputation record.
pub fn estimate_with_plan(
    data: &TrialDataset,
    config: &EstimatorConfig,
    plan: Option<&ImputationPlan>,
) -> Result<(ArmMeans, ImputationRecord)> {
    let Some(plan) = plan else {
        return Ok((estimate(data, config)?, ImputationRecord::default()));
    };
    let (data, record) = if data.has_missing_covariates() {
        impute_covariates(data, plan)?
    } else {
        (data.clone(), ImputationRecord::default())
    };
    let formula = record.adapt_formula(&config.formula);
    let adapted = EstimatorConfig {
        formula: formula.clone(),
        ..config.clone()
    };
    if !data.has_missing_outcome() {
        return Ok((estimate(&data, &adapted)?, record));
    }
    let means = match plan.outcome_strategy {
        OutcomeStrategy::CompleteCaseError => {
            return Err(Error::UnhandledMissing {
                what: "outcomes".into(),
            })
        }
        strategy => {
            if !matches!(
                config.method,
                Method::StandardizationSeparate | Method::AipwGeneral
            ) {
                return Err(Error::config(
                    "imputation.outcome_strategy",
                    format!(
                        "missing outcomes are handled by per-arm standardization; `{}` is not supported",
                        config.method
                    ),
                ));
            }
            if strategy == OutcomeStrategy::MarStandardization {
                mar_standardization(&data, &formula, config.link)?
            } else {
                let missingness = plan
                    .missingness_formula
                    .as_ref()
                    .map_or_else(|| formula.clone(), |f| record.adapt_formula(f));
                dr_weighted_standardization(&data, &formula, config.link, &missingness)?
            }
        }
    };
    Ok((means, record))
}
