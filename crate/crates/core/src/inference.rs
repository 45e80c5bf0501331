//! Standard errors, confidence intervals and Wald tests for marginal
//! contrasts.
//!
//! Ratio and odds-ratio contrasts are handled on the log scale: standard
//! errors refer to `log(contrast)` and intervals are back-transformed.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::{EstimandSpec, Scale, TrialDataset};
use crate::error::{Error, Result};
use crate::estimators::{contrast, contrast_of, estimate, ArmMeans, CoefficientEstimate, EstimatorConfig};
use crate::stats::{normal_cdf, normal_quantile, quantile_sorted, sample_sd, sample_variance, two_sided_p};

/// Maximum tolerated fraction of failed bootstrap or jackknife fits.
const MAX_FAILURE_FRACTION: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceMethod {
    Influence,
    InfluenceCorrected,
    Bootstrap,
    Bca,
}

/// Per-patient influence contributions of a contrast on its inference scale.
#[derive(Debug, Clone, PartialEq)]
pub struct InfluenceVector {
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CorrectionInputs {
    pub n1: usize,
    pub n0: usize,
    pub p1: usize,
    pub p0: usize,
}

impl From<&ArmMeans> for CorrectionInputs {
    fn from(m: &ArmMeans) -> Self {
        Self {
            n1: m.n1,
            n0: m.n0,
            p1: m.p1,
            p0: m.p0,
        }
    }
}

/// Point estimate with standard error, interval and Wald test.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimateResult {
    pub point: f64,
    pub estimand: EstimandSpec,
    /// Standard error on the inference scale (`log` for ratio and odds ratio).
    pub se: f64,
    pub log_scale: bool,
    pub ci_low: f64,
    pub ci_high: f64,
    pub ci_level: f64,
    pub test_statistic: f64,
    pub p_value: f64,
    pub variance_method: VarianceMethod,
    pub diagnostics: BTreeMap<String, Value>,
}

/// Maps a contrast to its inference scale.
pub fn to_inference_scale(value: f64, scale: Scale) -> f64 {
    if scale.is_multiplicative() {
        value.ln()
    } else {
        value
    }
}

pub fn from_inference_scale(theta: f64, scale: Scale) -> f64 {
    if scale.is_multiplicative() {
        theta.exp()
    } else {
        theta
    }
}

/// Influence-function standard error of the contrast.
///
/// On the difference scale the per-patient values are
/// `Z/pi (Y - h1) + h1 - [(1-Z)/(1-pi) (Y - h0) + h0]` (centered), and
/// `se^2` is their sample variance divided by `n`. Ratio and odds-ratio
/// scales use the delta method on `log mu1 - log mu0` and
/// `logit mu1 - logit mu0`.
pub fn influence_variance(means: &ArmMeans, scale: Scale) -> Result<(f64, InfluenceVector)> {
    let (m1, m0) = (means.mu1_hat, means.mu0_hat);
    let (a1, a0) = match scale {
        Scale::Difference => (1.0, 1.0),
        Scale::Ratio => {
            if m1 <= 0.0 || m0 <= 0.0 {
                return Err(Error::BoundaryEstimate {
                    detail: format!("mu1 = {m1}, mu0 = {m0}"),
                });
            }
            (1.0 / m1, 1.0 / m0)
        }
        Scale::OddsRatio => {
            let inside = |m: f64| m > 0.0 && m < 1.0;
            if !inside(m1) || !inside(m0) {
                return Err(Error::BoundaryEstimate {
                    detail: format!("mu1 = {m1}, mu0 = {m0}"),
                });
            }
            (1.0 / (m1 * (1.0 - m1)), 1.0 / (m0 * (1.0 - m0)))
        }
    };
    let values: Vec<f64> = means
        .influence1
        .iter()
        .zip(&means.influence0)
        .map(|(p1, p0)| a1 * p1 - a0 * p0)
        .collect();
    let n = values.len() as f64;
    let se = (sample_variance(&values) / n).sqrt();
    Ok((se, InfluenceVector { values }))
}

/// Small-sample variance inflation
/// `[(n0-p0-1)^-1 + (n1-p1-1)^-1] / [(n0-1)^-1 + (n1-1)^-1]`.
pub fn small_sample_correction(inputs: CorrectionInputs) -> Result<f64> {
    let CorrectionInputs { n1, n0, p1, p0 } = inputs;
    if n1 <= p1 + 1 || n0 <= p0 + 1 {
        return Err(Error::TooFewPatients(format!(
            "correction factor needs n_j > p_j + 1 (n1 = {n1}, p1 = {p1}, n0 = {n0}, p0 = {p0})"
        )));
    }
    let inv = |v: usize| 1.0 / v as f64;
    Ok((inv(n0 - p0 - 1) + inv(n1 - p1 - 1)) / (inv(n0 - 1) + inv(n1 - 1)))
}

/// Two-sided Wald test of `contrast = null_value` on the inference scale.
pub fn wald_test(result: &EstimateResult, null_value: f64) -> Result<(f64, f64)> {
    let scale = result.estimand.scale;
    wald(
        to_inference_scale(result.point, scale),
        to_inference_scale(null_value, scale),
        result.se,
    )
}

/// Wald test of a conditional model coefficient equal to zero.
pub fn wald_coefficient(coef: &CoefficientEstimate) -> Result<(f64, f64)> {
    wald(coef.estimate, 0.0, coef.std_error)
}

fn wald(theta: f64, null: f64, se: f64) -> Result<(f64, f64)> {
    if !(se > 0.0) || !se.is_finite() {
        return Err(Error::ZeroStandardError);
    }
    let z = (theta - null) / se;
    Ok((z, two_sided_p(z)))
}

/// Bootstrap replicates of a contrast on its inference scale.
#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapOutput {
    pub se: f64,
    /// Percentile interval on the natural scale.
    pub ci_low: f64,
    pub ci_high: f64,
    /// Successful replicates on the inference scale, in replicate order.
    pub replicates: Vec<f64>,
    pub requested: usize,
    pub failures: usize,
}

/// Any estimator of the two arm means, as re-run on resampled data.
pub type EstimatorFn<'a> = dyn Fn(&TrialDataset) -> Result<ArmMeans> + Sync + 'a;

/// What resampling-based inference re-runs on each replicate.
#[derive(Clone, Copy)]
pub struct Resampling<'a> {
    pub estimator: &'a EstimatorFn<'a>,
    /// Non-intercept parameters per arm; each arm needs `p + 3` patients.
    pub params_per_arm: usize,
    /// Arm means of earlier resamples, reused across scales.
    pub cache: Option<&'a ResampleCache>,
}

impl<'a> Resampling<'a> {
    pub fn new(estimator: &'a EstimatorFn<'a>, params_per_arm: usize) -> Self {
        Self {
            estimator,
            params_per_arm,
            cache: None,
        }
    }

    pub fn with_cache(mut self, cache: &'a ResampleCache) -> Self {
        self.cache = Some(cache);
        self
    }
}

type MeanPairs = Vec<Option<(f64, f64)>>;

/// Bootstrap and jackknife arm means of one dataset and estimator. Only
/// valid for the dataset and estimator it was first used with.
#[derive(Debug, Default)]
pub struct ResampleCache {
    bootstrap: OnceLock<(u64, usize, MeanPairs)>,
    jackknife: OnceLock<MeanPairs>,
}

fn means_of(data: &TrialDataset, estimator: &EstimatorFn<'_>) -> Option<(f64, f64)> {
    estimator(data).ok().map(|m| (m.mu1_hat, m.mu0_hat))
}

fn bootstrap_pairs(data: &TrialDataset, estimator: &EstimatorFn<'_>, replicates: usize, seed: u64) -> MeanPairs {
    let n = data.n();
    (0..replicates)
        .into_par_iter()
        .map(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(b as u64);
            let rows: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            data.select_rows(&rows).ok().and_then(|d| means_of(&d, estimator))
        })
        .collect()
}

fn jackknife_pairs(data: &TrialDataset, estimator: &EstimatorFn<'_>) -> MeanPairs {
    let n = data.n();
    (0..n)
        .into_par_iter()
        .map(|drop| {
            let rows: Vec<usize> = (0..n).filter(|&i| i != drop).collect();
            data.select_rows(&rows).ok().and_then(|d| means_of(&d, estimator))
        })
        .collect()
}

fn theta_from(pair: (f64, f64), scale: Scale) -> Option<f64> {
    let t = to_inference_scale(contrast_of(pair.0, pair.1, scale).ok()?, scale);
    t.is_finite().then_some(t)
}

/// Contrast of one estimator run on the inference scale.
fn theta_of(data: &TrialDataset, estimator: &EstimatorFn<'_>, scale: Scale) -> Result<f64> {
    let m = estimator(data)?;
    let c = contrast(&m, scale)?;
    let t = to_inference_scale(c, scale);
    if t.is_finite() {
        Ok(t)
    } else {
        Err(Error::BoundaryEstimate {
            detail: format!("contrast {c}"),
        })
    }
}

fn check_resampling_size(data: &TrialDataset, p: usize) -> Result<()> {
    let min = p + 3;
    if data.n_treated() < min || data.n_control() < min {
        return Err(Error::TooFewPatients(format!(
            "resampling needs at least {min} patients per arm (have {} treated, {} control)",
            data.n_treated(),
            data.n_control()
        )));
    }
    Ok(())
}

pub const MIN_BOOTSTRAP_REPLICATES: usize = 200;

fn too_many_failures(failed: usize, total: usize) -> bool {
    failed as f64 > MAX_FAILURE_FRACTION * total as f64
}

/// Nonparametric bootstrap resampling whole patient rows.
///
/// Replicate `b` draws from an independent ChaCha stream keyed by
/// `(seed, b)`, so output does not depend on thread scheduling.
pub fn bootstrap_variance(
    data: &TrialDataset,
    config: &EstimatorConfig,
    scale: Scale,
    replicates: usize,
    seed: u64,
    level: f64,
) -> Result<BootstrapOutput> {
    let f = |d: &TrialDataset| estimate(d, config);
    let plan = Resampling::new(&f, config.params_per_arm());
    bootstrap_with(data, plan, scale, replicates, seed, level)
}

pub fn bootstrap_with(
    data: &TrialDataset,
    plan: Resampling<'_>,
    scale: Scale,
    replicates: usize,
    seed: u64,
    level: f64,
) -> Result<BootstrapOutput> {
    if replicates < MIN_BOOTSTRAP_REPLICATES {
        return Err(Error::config(
            "variance.bootstrap_replicates",
            "at least 200 bootstrap replicates are required",
        ));
    }
    check_level(level)?;
    check_resampling_size(data, plan.params_per_arm)?;
    let fresh;
    let pairs = match plan.cache {
        Some(cache) => {
            let (s, r, p) = cache
                .bootstrap
                .get_or_init(|| (seed, replicates, bootstrap_pairs(data, plan.estimator, replicates, seed)));
            if (*s, *r) == (seed, replicates) {
                p
            } else {
                fresh = bootstrap_pairs(data, plan.estimator, replicates, seed);
                &fresh
            }
        }
        None => {
            fresh = bootstrap_pairs(data, plan.estimator, replicates, seed);
            &fresh
        }
    };
    let reps: Vec<f64> = pairs.iter().filter_map(|p| p.and_then(|p| theta_from(p, scale))).collect();
    let failures = replicates - reps.len();
    if too_many_failures(failures, replicates) {
        return Err(Error::ExcessiveFailures {
            failed: failures,
            total: replicates,
        });
    }
    let mut sorted = reps.clone();
    sorted.sort_by(f64::total_cmp);
    let alpha = 1.0 - level;
    Ok(BootstrapOutput {
        se: sample_sd(&reps),
        ci_low: from_inference_scale(quantile_sorted(&sorted, alpha / 2.0), scale),
        ci_high: from_inference_scale(quantile_sorted(&sorted, 1.0 - alpha / 2.0), scale),
        replicates: reps,
        requested: replicates,
        failures,
    })
}

/// BCa interval pieces on the inference scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BcaInterval {
    pub low: f64,
    pub high: f64,
    pub z0: f64,
    pub acceleration: f64,
}

/// Bias-corrected and accelerated percentile interval from bootstrap
/// replicates and leave-one-out estimates, all on the same scale as `point`.
pub fn bca_from_replicates(
    point: f64,
    replicates: &[f64],
    jackknife: &[f64],
    level: f64,
) -> Result<BcaInterval> {
    check_level(level)?;
    if replicates.is_empty() || jackknife.len() < 2 {
        return Err(Error::TooFewPatients(
            "BCa needs bootstrap replicates and at least two jackknife values".into(),
        ));
    }
    let b = replicates.len() as f64;
    let below = replicates.iter().filter(|&&t| t < point).count() as f64;
    let ties = replicates.iter().filter(|&&t| t == point).count() as f64;
    let frac = ((below + 0.5 * ties) / b).clamp(0.5 / b, 1.0 - 0.5 / b);
    let z0 = normal_quantile(frac);

    let jm = jackknife.iter().sum::<f64>() / jackknife.len() as f64;
    let (mut num, mut den) = (0.0, 0.0);
    for &t in jackknife {
        let d = jm - t;
        num += d * d * d;
        den += d * d;
    }
    let acceleration = if den > 0.0 { num / (6.0 * den.powf(1.5)) } else { 0.0 };

    let adjust = |alpha: f64| {
        let za = normal_quantile(alpha);
        normal_cdf(z0 + (z0 + za) / (1.0 - acceleration * (z0 + za)))
    };
    let alpha = 1.0 - level;
    let mut sorted = replicates.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(BcaInterval {
        low: quantile_sorted(&sorted, adjust(alpha / 2.0)),
        high: quantile_sorted(&sorted, adjust(1.0 - alpha / 2.0)),
        z0,
        acceleration,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BcaOutput {
    /// Interval on the natural scale.
    pub ci_low: f64,
    pub ci_high: f64,
    pub interval: BcaInterval,
    pub bootstrap: BootstrapOutput,
    pub jackknife_failures: usize,
}

/// BCa bootstrap interval: bias correction from the share of replicates
/// below the point estimate, acceleration from jackknife skewness.
pub fn bca_interval(
    data: &TrialDataset,
    config: &EstimatorConfig,
    scale: Scale,
    replicates: usize,
    seed: u64,
    level: f64,
) -> Result<BcaOutput> {
    let f = |d: &TrialDataset| estimate(d, config);
    let plan = Resampling::new(&f, config.params_per_arm());
    bca_with(data, plan, scale, replicates, seed, level)
}

pub fn bca_with(
    data: &TrialDataset,
    plan: Resampling<'_>,
    scale: Scale,
    replicates: usize,
    seed: u64,
    level: f64,
) -> Result<BcaOutput> {
    check_resampling_size(data, plan.params_per_arm)?;
    let point = theta_of(data, plan.estimator, scale)?;
    let bootstrap = bootstrap_with(data, plan, scale, replicates, seed, level)?;
    let n = data.n();
    let fresh;
    let pairs = match plan.cache {
        Some(cache) => cache.jackknife.get_or_init(|| jackknife_pairs(data, plan.estimator)),
        None => {
            fresh = jackknife_pairs(data, plan.estimator);
            &fresh
        }
    };
    let jack: Vec<f64> = pairs.iter().filter_map(|p| p.and_then(|p| theta_from(p, scale))).collect();
    let jackknife_failures = n - jack.len();
    if too_many_failures(jackknife_failures, n) {
        return Err(Error::ExcessiveFailures {
            failed: jackknife_failures,
            total: n,
        });
    }
    let interval = bca_from_replicates(point, &bootstrap.replicates, &jack, level)?;
    Ok(BcaOutput {
        ci_low: from_inference_scale(interval.low, scale),
        ci_high: from_inference_scale(interval.high, scale),
        interval,
        bootstrap,
        jackknife_failures,
    })
}

fn check_level(level: f64) -> Result<()> {
    if level > 0.0 && level < 1.0 {
        Ok(())
    } else {
        Err(Error::config("variance.ci_level", "must lie strictly between 0 and 1"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferenceOptions {
    #[serde(default = "default_method")]
    pub method: VarianceMethod,
    #[serde(default = "default_replicates")]
    pub bootstrap_replicates: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_level")]
    pub ci_level: f64,
}

fn default_method() -> VarianceMethod {
    VarianceMethod::Influence
}
fn default_replicates() -> usize {
    1000
}
/// Fixed default seed; runs are reproducible unless a seed is given.
pub const DEFAULT_SEED: u64 = 20_240_229;
fn default_seed() -> u64 {
    DEFAULT_SEED
}
fn default_level() -> f64 {
    0.95
}

impl Default for InferenceOptions {
    fn default() -> Self {
        Self {
            method: default_method(),
            bootstrap_replicates: default_replicates(),
            seed: default_seed(),
            ci_level: default_level(),
        }
    }
}

/// Estimate, standard error, interval and test for already computed arm
/// means. Bootstrap methods re-run `plan.estimator` on resampled data.
pub fn infer_from_means(
    data: &TrialDataset,
    plan: Resampling<'_>,
    means: &ArmMeans,
    estimand: EstimandSpec,
    options: &InferenceOptions,
) -> Result<EstimateResult> {
    check_level(options.ci_level)?;
    let scale = estimand.scale;
    let point = contrast(means, scale)?;
    let theta = to_inference_scale(point, scale);
    let mut diagnostics: BTreeMap<String, Value> = means.diagnostics.clone();
    let mut warnings: Vec<String> = Vec::new();

    let (influence_se, _) = influence_variance(means, scale)?;
    diagnostics.insert("influence_se".into(), influence_se.into());
    diagnostics.insert("pi_hat".into(), means.pi_hat.into());
    diagnostics.insert("n_treated".into(), means.n1.into());
    diagnostics.insert("n_control".into(), means.n0.into());
    diagnostics.insert("p_treated".into(), means.p1.into());
    diagnostics.insert("p_control".into(), means.p0.into());
    let n = means.n().max(1);
    let p = means.p1.max(means.p0);
    diagnostics.insert("p_over_n".into(), (p as f64 / n as f64).into());
    if p as f64 > n as f64 / 20.0 {
        warnings.push(format!(
            "{p} adjustment parameters for {n} patients exceeds the n/20 heuristic; \
             asymptotic variance estimates may be optimistic"
        ));
    }
    let correction = small_sample_correction(CorrectionInputs::from(means));
    if let Ok(f) = correction {
        diagnostics.insert("correction_factor".into(), f.into());
    }

    let z = normal_quantile(0.5 + options.ci_level / 2.0);
    let normal_ci = |se: f64| {
        (
            from_inference_scale(theta - z * se, scale),
            from_inference_scale(theta + z * se, scale),
        )
    };
    let (se, ci_low, ci_high) = match options.method {
        VarianceMethod::Influence => {
            let (lo, hi) = normal_ci(influence_se);
            (influence_se, lo, hi)
        }
        VarianceMethod::InfluenceCorrected => {
            let f = correction?;
            diagnostics.insert("correction_applied".into(), true.into());
            let se = influence_se * f.sqrt();
            let (lo, hi) = normal_ci(se);
            (se, lo, hi)
        }
        VarianceMethod::Bootstrap => {
            let boot = bootstrap_with(
                data,
                plan,
                scale,
                options.bootstrap_replicates,
                options.seed,
                options.ci_level,
            )?;
            diagnostics.insert("bootstrap_replicates_used".into(), boot.replicates.len().into());
            diagnostics.insert("bootstrap_failures".into(), boot.failures.into());
            (boot.se, boot.ci_low, boot.ci_high)
        }
        VarianceMethod::Bca => {
            let bca = bca_with(
                data,
                plan,
                scale,
                options.bootstrap_replicates,
                options.seed,
                options.ci_level,
            )?;
            diagnostics.insert("bootstrap_replicates_used".into(), bca.bootstrap.replicates.len().into());
            diagnostics.insert("bootstrap_failures".into(), bca.bootstrap.failures.into());
            diagnostics.insert("jackknife_failures".into(), bca.jackknife_failures.into());
            diagnostics.insert("bca_z0".into(), bca.interval.z0.into());
            diagnostics.insert("bca_acceleration".into(), bca.interval.acceleration.into());
            (bca.bootstrap.se, bca.ci_low, bca.ci_high)
        }
    };
    if let Some(coef) = &means.conditional {
        diagnostics.insert("conditional_coefficient".into(), coef.estimate.into());
        diagnostics.insert("conditional_std_error".into(), coef.std_error.into());
    }
    if !warnings.is_empty() {
        diagnostics.insert("warnings".into(), warnings.into());
    }
    let (test_statistic, p_value) = wald(theta, to_inference_scale(scale.null_value(), scale), se)
        .unwrap_or((f64::NAN, f64::NAN));
    Ok(EstimateResult {
        point,
        estimand,
        se,
        log_scale: scale.is_multiplicative(),
        ci_low,
        ci_high,
        ci_level: options.ci_level,
        test_statistic,
        p_value,
        variance_method: options.method,
        diagnostics,
    })
}

/// Runs the estimator and its inference in one call.
pub fn infer(
    data: &TrialDataset,
    config: &EstimatorConfig,
    estimand: EstimandSpec,
    options: &InferenceOptions,
) -> Result<EstimateResult> {
    let means = estimate(data, config)?;
    let f = |d: &TrialDataset| estimate(d, config);
    let plan = Resampling::new(&f, config.params_per_arm());
    infer_from_means(data, plan, &means, estimand, options)
}
