//! Covariate-adjusted estimation of marginal treatment effects in two-arm
//! randomized trials.

// `!(x > 0.0)` guards are written that way to reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod config;
pub mod data;
pub mod error;
pub mod estimators;
pub mod glm;
pub mod inference;
pub mod missing;
pub mod simulation;
mod stats;

pub use data::{
    check_scale_kind, load_dataset, read_dataset, validate_estimand, DataSchema, EstimandSpec, ModelFormula,
    OutcomeKind, Scale, Term, TrialDataset,
};
pub use error::{Arm, Error, ErrorCategory, Result};
pub use glm::{fit_glm, predict_mean, GlmFit, LinkFunction, WorkingModelFit};
pub use estimators::{contrast, estimate, ArmMeans, EstimatorConfig, Method};
pub use inference::{
    infer, influence_variance, small_sample_correction, wald_test, EstimateResult,
    InferenceOptions, VarianceMethod,
};
pub use missing::{
    dr_weighted_standardization, estimate_with_plan, impute_covariates, mar_standardization,
    CovariateStrategy, ImputationPlan, ImputationRecord, OutcomeStrategy,
};
pub use config::{load_config, parse_config, ConfigFormat, EstimatorSpec};
pub use simulation::{
    resolve_truth, run_monte_carlo, simulate_trial, true_estimands, CovariateLaw, DgpSpec,
    MonteCarloReport, OutcomeModel, SimulationConfig, Truth,
};
pub use analysis::{
    run_analysis, validate_inputs, validate_with_data, AnalysisConfig, AnalysisReport, Finding,
    Severity, ValidationReport,
};
