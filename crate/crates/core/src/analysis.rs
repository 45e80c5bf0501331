//! Configured analyses of one trial dataset: estimation with every
//! configured estimator on every requested scale, and input validation that
//! stops short of estimation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config::{check_estimators, EstimatorSpec};
use crate::data::{load_dataset, validate_estimand, DataSchema, EstimandSpec, OutcomeKind, Scale, TrialDataset};
use crate::error::{Arm, Error, Result};
use crate::estimators::{EstimatorConfig, Method};
use crate::glm::{check_rank, LinkFunction};
use crate::inference::{infer_from_means, InferenceOptions, ResampleCache, Resampling, VarianceMethod};
use crate::missing::{estimate_with_plan, impute_covariates, ImputationPlan, ImputationRecord, OutcomeStrategy, HIGH_MISSINGNESS};

pub const ANALYSIS_SCHEMA: &str = "covadj.analysis/1";
pub const VALIDATION_SCHEMA: &str = "covadj.validation/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimandConfig {
    pub outcome_kind: OutcomeKind,
    #[serde(default = "default_scales")]
    pub scales: Vec<Scale>,
}

fn default_scales() -> Vec<Scale> {
    vec![Scale::Difference]
}

/// Everything an analysis run needs besides the data file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisConfig {
    pub data: DataSchema,
    pub estimand: EstimandConfig,
    pub estimators: Vec<EstimatorSpec>,
    #[serde(default)]
    pub imputation: Option<ImputationPlan>,
    #[serde(default)]
    pub inference: InferenceOptions,
    /// Report path used when none is given on the command line.
    #[serde(default)]
    pub output: Option<PathBuf>,
}

impl AnalysisConfig {
    /// Structural checks that need no data.
    pub fn check(&self) -> Result<()> {
        if self.estimand.scales.is_empty() {
            return Err(Error::config("estimand.scales", "at least one scale is required"));
        }
        for &scale in &self.estimand.scales {
            crate::data::check_scale_kind(scale, self.estimand.outcome_kind)?;
        }
        check_estimators(&self.estimators)?;
        let level = self.inference.ci_level;
        if !(level > 0.0 && level < 1.0) {
            return Err(Error::config("inference.ci_level", "must lie strictly between 0 and 1"));
        }
        for s in &self.estimators {
            for c in s.to_config()?.formula.columns_used() {
                if !self.data.covariates.iter().any(|k| k == c) {
                    return Err(Error::config(
                        format!("estimators.{}.terms", s.label()),
                        format!("`{c}` is not listed under data.covariates"),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Result on one scale.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScaleResult {
    pub scale: Scale,
    pub estimate: f64,
    /// Standard error on the inference scale (`log` for ratio scales).
    pub se: f64,
    pub log_scale: bool,
    pub ci_low: f64,
    pub ci_high: f64,
    pub z: f64,
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimatorReport {
    pub name: String,
    pub primary: bool,
    pub method: Method,
    pub link: LinkFunction,
    pub formula: String,
    pub mu1: f64,
    pub mu0: f64,
    pub n_treated: usize,
    pub n_control: usize,
    pub p_treated: usize,
    pub p_control: usize,
    pub correction_factor: Option<f64>,
    pub results: Vec<ScaleResult>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub imputation: Option<ImputationRecord>,
    pub diagnostics: BTreeMap<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MissingnessSummary {
    pub outcome: usize,
    pub covariates: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnalysisReport {
    pub schema_version: &'static str,
    pub n: usize,
    pub n_treated: usize,
    pub n_control: usize,
    pub pi_hat: f64,
    pub outcome_kind: OutcomeKind,
    pub inference: InferenceOptions,
    pub missing: MissingnessSummary,
    pub estimators: Vec<EstimatorReport>,
}

fn missingness_summary(data: &TrialDataset) -> MissingnessSummary {
    let mask = data.covariate_missing();
    MissingnessSummary {
        outcome: data.outcome_missing().iter().filter(|&&m| m).count(),
        covariates: data
            .covariate_names()
            .iter()
            .enumerate()
            .map(|(j, name)| (name.clone(), mask.column(j).iter().filter(|&&m| m).count()))
            .collect(),
    }
}

/// Runs every configured estimator on `data` and assembles the report.
pub fn run_analysis(config: &AnalysisConfig, data: &TrialDataset) -> Result<AnalysisReport> {
    config.check()?;
    for &scale in &config.estimand.scales {
        validate_estimand(EstimandSpec::new(scale, config.estimand.outcome_kind), data)?;
    }
    let plan = config.imputation.as_ref();
    let mut estimators = Vec::with_capacity(config.estimators.len());
    for spec in &config.estimators {
        estimators.push(run_one(config, spec, data, plan)?);
    }
    Ok(AnalysisReport {
        schema_version: ANALYSIS_SCHEMA,
        n: data.n(),
        n_treated: data.n_treated(),
        n_control: data.n_control(),
        pi_hat: data.pi_hat(),
        outcome_kind: config.estimand.outcome_kind,
        inference: config.inference,
        missing: missingness_summary(data),
        estimators,
    })
}

fn run_one(
    config: &AnalysisConfig,
    spec: &EstimatorSpec,
    data: &TrialDataset,
    plan: Option<&ImputationPlan>,
) -> Result<EstimatorReport> {
    let est = spec.to_config()?;
    let (means, record) = estimate_with_plan(data, &est, plan)?;
    let f = |d: &TrialDataset| estimate_with_plan(d, &est, plan).map(|(m, _)| m);
    let cache = ResampleCache::default();
    let fitted = EstimatorConfig {
        formula: record.adapt_formula(&est.formula),
        ..est.clone()
    };
    let resampling = Resampling::new(&f, fitted.params_per_arm()).with_cache(&cache);
    let mut results = Vec::new();
    let mut diagnostics = BTreeMap::new();
    for &scale in &config.estimand.scales {
        let estimand = EstimandSpec::new(scale, config.estimand.outcome_kind);
        let r = infer_from_means(data, resampling, &means, estimand, &config.inference)?;
        if diagnostics.is_empty() {
            diagnostics = r.diagnostics.clone();
        }
        results.push(ScaleResult {
            scale,
            estimate: r.point,
            se: r.se,
            log_scale: r.log_scale,
            ci_low: r.ci_low,
            ci_high: r.ci_high,
            z: r.test_statistic,
            p_value: r.p_value,
        });
    }
    let correction_factor = diagnostics.get("correction_factor").and_then(Value::as_f64);
    let corrected = config.inference.method == VarianceMethod::InfluenceCorrected;
    if corrected && means.p1.max(means.p0) > 0 && est.link != LinkFunction::Identity {
        let w = diagnostics.entry("warnings".to_string()).or_insert_with(|| Value::Array(vec![]));
        if let Value::Array(list) = w {
            list.push("correction factor applied to a nonlinear working model".into());
        }
    }
    let used_plan = plan.is_some() && (data.has_missing_covariates() || data.has_missing_outcome());
    Ok(EstimatorReport {
        name: spec.label(),
        primary: spec.primary,
        method: est.method,
        link: est.link,
        formula: fitted.formula.to_string(),
        mu1: means.mu1_hat,
        mu0: means.mu0_hat,
        n_treated: means.n1,
        n_control: means.n0,
        p_treated: means.p1,
        p_control: means.p0,
        correction_factor,
        results,
        imputation: used_plan.then_some(record),
        diagnostics,
    })
}

impl AnalysisReport {
    /// Plain-text table of the results.
    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "n = {} ({} treated, {} control), pi_hat = {:.4}",
            self.n, self.n_treated, self.n_control, self.pi_hat
        );
        let level = 100.0 * self.inference.ci_level;
        for e in &self.estimators {
            let star = if e.primary { " [primary]" } else { "" };
            let _ = writeln!(s, "\n{}{} ({}, {} link): {}", e.name, star, e.method, e.link.name(), e.formula);
            let _ = writeln!(s, "  mu1 = {:.6}  mu0 = {:.6}", e.mu1, e.mu0);
            for r in &e.results {
                let _ = writeln!(
                    s,
                    "  {:<11} {:>10.6}  se {:.6}{}  {level:.0}% CI [{:.6}, {:.6}]  p = {:.4}",
                    r.scale.to_string(),
                    r.estimate,
                    r.se,
                    if r.log_scale { " (log)" } else { "" },
                    r.ci_low,
                    r.ci_high,
                    r.p_value
                );
            }
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    Info,
    Warning,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Finding {
    pub severity: Severity,
    pub code: String,
    pub message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub estimator: Option<String>,
}

impl Finding {
    fn new(severity: Severity, code: &str, message: impl Into<String>) -> Self {
        Self {
            severity,
            code: code.into(),
            message: message.into(),
            estimator: None,
        }
    }

    fn from_error(e: &Error) -> Self {
        Self::new(Severity::Error, e.kind(), e.to_string())
    }

    fn for_estimator(mut self, name: &str) -> Self {
        self.estimator = Some(name.into());
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub schema_version: &'static str,
    pub findings: Vec<Finding>,
}

impl ValidationReport {
    pub fn has_errors(&self) -> bool {
        self.findings.iter().any(|f| f.severity == Severity::Error)
    }
}

/// Checks a config against a data file without estimating anything: scale
/// legality, missingness rates, design rank per working model and the
/// adjustment-to-sample-size ratio. Only an unreadable data file is an
/// error; every other problem becomes a finding.
pub fn validate_inputs(config: &AnalysisConfig, data_path: &Path) -> Result<ValidationReport> {
    let findings = match load_dataset(data_path, &config.data) {
        Ok(data) => validate_with_data(config, &data),
        Err(e @ Error::Io { .. }) => return Err(e),
        Err(e) => {
            let mut f = Vec::new();
            if let Err(c) = config.check() {
                f.push(Finding::from_error(&c));
            }
            f.push(Finding::from_error(&e));
            f
        }
    };
    Ok(ValidationReport {
        schema_version: VALIDATION_SCHEMA,
        findings,
    })
}

pub fn validate_with_data(config: &AnalysisConfig, data: &TrialDataset) -> Vec<Finding> {
    let mut out = Vec::new();
    if let Err(e) = config.check() {
        out.push(Finding::from_error(&e));
    }
    for &scale in &config.estimand.scales {
        if let Err(e) = validate_estimand(EstimandSpec::new(scale, config.estimand.outcome_kind), data) {
            if !out.iter().any(|f| f.message == e.to_string()) {
                out.push(Finding::from_error(&e));
            }
        }
    }

    let n = data.n() as f64;
    for (name, rate) in data.covariate_names().iter().zip(data.covariate_missing_rates()) {
        if rate > HIGH_MISSINGNESS {
            out.push(Finding::new(
                Severity::Warning,
                "HighMissingness",
                format!(
                    "`{name}` is missing for {:.0}% of patients; consider excluding it from adjustment \
                     (imputation.covariate_strategy = \"exclude_column\")",
                    100.0 * rate
                ),
            ));
        } else if rate > 0.0 {
            out.push(Finding::new(
                Severity::Info,
                "CovariateMissingness",
                format!("`{name}` is missing for {:.1}% of patients", 100.0 * rate),
            ));
        }
    }
    let missing_y = data.outcome_missing().iter().filter(|&&m| m).count();
    let outcome_plan = config.imputation.as_ref().map(|p| p.outcome_strategy);
    if missing_y > 0 {
        let handled = matches!(
            outcome_plan,
            Some(OutcomeStrategy::MarStandardization | OutcomeStrategy::DrWeighted)
        );
        out.push(Finding::new(
            if handled { Severity::Info } else { Severity::Error },
            if handled { "OutcomeMissingness" } else { "UnhandledMissing" },
            format!(
                "outcome is missing for {missing_y} of {} patients ({:.1}%)",
                data.n(),
                100.0 * missing_y as f64 / n
            ),
        ));
    }

    // design checks on the data the estimators would see
    let imputed = match (&config.imputation, data.has_missing_covariates()) {
        (Some(plan), true) => match impute_covariates(data, plan) {
            Ok((d, rec)) => Some((d, rec)),
            Err(e) => {
                out.push(Finding::from_error(&e));
                None
            }
        },
        _ => Some((data.clone(), ImputationRecord::default())),
    };
    let Some((prepared, record)) = imputed else {
        return out;
    };
    for spec in &config.estimators {
        let Ok(est) = spec.to_config() else { continue };
        let est = EstimatorConfig {
            formula: record.adapt_formula(&est.formula),
            ..est
        };
        let label = spec.label();
        if est.formula.validate(prepared.covariate_names()).is_err() {
            continue;
        }
        for f in design_findings(&prepared, &est) {
            out.push(f.for_estimator(&label));
        }
        let p = est.params_per_arm();
        if p as f64 > n / 20.0 {
            out.push(
                Finding::new(
                    Severity::Warning,
                    "ManyParameters",
                    format!(
                        "{p} adjustment parameters for {} patients exceeds the n/20 heuristic",
                        data.n()
                    ),
                )
                .for_estimator(&label),
            );
        }
    }
    out
}

fn design_findings(data: &TrialDataset, est: &EstimatorConfig) -> Vec<Finding> {
    let missing = data.outcome_missing();
    let arm_rows = |arm: Arm| -> Vec<usize> {
        data.arm_rows(arm).into_iter().filter(|&i| !missing[i]).collect()
    };
    let mut out = Vec::new();
    let mut check = |what: &str, design: Result<DMatrix<f64>>| match design.and_then(|d| check_rank(&d).map(|_| ())) {
        Ok(()) => {}
        Err(e) => {
            let mut f = Finding::from_error(&e);
            f.message = format!("{what}: {}", f.message);
            out.push(f);
        }
    };
    match est.method {
        Method::Unadjusted => {}
        Method::StandardizationPooled | Method::Ancova => {
            let all: Vec<usize> = (0..data.n()).filter(|&i| !missing[i]).collect();
            let design = est.formula.design_rows(data, &all).map(|base| {
                let z = data.arm();
                DMatrix::from_fn(base.nrows(), base.ncols() + 1, |r, j| match j {
                    0 => base[(r, 0)],
                    1 => f64::from(z[all[r]]),
                    _ => base[(r, j - 1)],
                })
            });
            check("pooled working model", design);
        }
        Method::Ipw => {
            let all: Vec<usize> = (0..data.n()).collect();
            check("treatment model", est.formula.design_rows(data, &all));
        }
        _ => {
            for arm in [Arm::Treated, Arm::Control] {
                let rows = arm_rows(arm);
                check(&format!("{arm} arm working model"), est.formula.design_rows(data, &rows));
            }
        }
    }
    out
}
