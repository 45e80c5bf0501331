//! Data-generating processes with known truth and the Monte-Carlo engine.
//!
//! Every replicate draws from its own ChaCha stream keyed by
//! `(seed, replicate index)`, and results are aggregated in index order, so
//! reports do not depend on the number of worker threads.

use std::collections::BTreeMap;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{check_estimators, EstimatorSpec};
use crate::data::{EstimandSpec, ModelFormula, OutcomeKind, Scale, TrialDataset};
use crate::error::{Error, Result};
use crate::estimators::{estimate_unadjusted, EstimatorConfig, Method};
use crate::glm::{expit, LinkFunction};
use crate::inference::{infer_from_means, InferenceOptions, Resampling, VarianceMethod};
use crate::missing::{estimate_with_plan, mar_standardization, ImputationPlan};
use crate::stats::{mean, sample_sd, sample_variance};

/// Largest number of Bernoulli covariates enumerated exactly.
const MAX_ENUMERATED: usize = 20;
/// Draws used when the truth has to be approximated.
pub const TRUTH_DRAWS: usize = 10_000_000;
/// Share of failed replicates above which a run is aborted.
pub const MAX_REPLICATE_FAILURES: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case", deny_unknown_fields)]
pub enum CovariateLaw {
    Bernoulli { p: f64 },
    Uniform { low: f64, high: f64 },
    Normal { mean: f64, sd: f64 },
}

impl CovariateLaw {
    fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        match *self {
            Self::Bernoulli { p } => f64::from(u8::from(rng.random::<f64>() < p)),
            Self::Uniform { low, high } => low + (high - low) * rng.random::<f64>(),
            Self::Normal { mean, sd } => Normal::new(mean, sd).expect("validated").sample(rng),
        }
    }

    fn mean(&self) -> f64 {
        match *self {
            Self::Bernoulli { p } => p,
            Self::Uniform { low, high } => (low + high) / 2.0,
            Self::Normal { mean, .. } => mean,
        }
    }

    fn second_moment(&self) -> f64 {
        match *self {
            Self::Bernoulli { p } => p,
            Self::Uniform { low, high } => (low * low + low * high + high * high) / 3.0,
            Self::Normal { mean, sd } => mean * mean + sd * sd,
        }
    }

    /// `E exp(b X + q X^2)` where it has a simple closed form.
    fn exp_moment(&self, b: f64, q: f64) -> Option<f64> {
        match *self {
            Self::Bernoulli { p } => Some(1.0 - p + p * (b + q).exp()),
            _ if q != 0.0 => None,
            _ if b == 0.0 => Some(1.0),
            Self::Uniform { low, high } => {
                Some(((b * high).exp() - (b * low).exp()) / (b * (high - low)))
            }
            Self::Normal { mean, sd } => Some((b * mean + b * b * sd * sd / 2.0).exp()),
        }
    }

    fn check(&self, field: &str) -> Result<()> {
        let bad = |msg: String| Err(Error::config(field, msg));
        match *self {
            Self::Bernoulli { p } if !(0.0..=1.0).contains(&p) => {
                bad(format!("bernoulli p must lie in [0, 1] (got {p})"))
            }
            Self::Uniform { low, high } if !(low < high) || !low.is_finite() || !high.is_finite() => {
                bad(format!("uniform bounds must satisfy low < high (got {low}, {high})"))
            }
            Self::Normal { mean, sd } if !(sd > 0.0) || !sd.is_finite() || !mean.is_finite() => {
                bad(format!("normal sd must be positive and finite (got {sd})"))
            }
            _ => Ok(()),
        }
    }
}

/// Potential-outcome model `g(E[Y^z | X]) = b0 + b1 z + sum_k (b_k + z g_k) X_k + q_k X_k^2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutcomeModel {
    pub link: LinkFunction,
    pub intercept: f64,
    pub treatment: f64,
    /// Main-effect coefficients, one per covariate.
    #[serde(default)]
    pub coefficients: Vec<f64>,
    /// Coefficients of squared covariates; empty means none.
    #[serde(default)]
    pub quadratic: Vec<f64>,
    /// Treatment-by-covariate coefficients; empty means none.
    #[serde(default)]
    pub interactions: Vec<f64>,
    /// Residual standard deviation for the identity link.
    #[serde(default = "one")]
    pub noise_sd: f64,
}

fn one() -> f64 {
    1.0
}

fn coef(v: &[f64], k: usize) -> f64 {
    v.get(k).copied().unwrap_or(0.0)
}

impl OutcomeModel {
    fn eta(&self, x: &[f64], z: f64) -> f64 {
        let mut eta = self.intercept + self.treatment * z;
        for (k, &xk) in x.iter().enumerate() {
            eta += (coef(&self.coefficients, k) + z * coef(&self.interactions, k)) * xk
                + coef(&self.quadratic, k) * xk * xk;
        }
        eta
    }

    /// Conditional mean of `Y^z` given covariates.
    pub fn mean(&self, x: &[f64], z: f64) -> f64 {
        self.link.inverse(self.eta(x, z))
    }
}

/// Outcome missingness: completely at random, or at random with
/// `logit P(observed) = intercept + treatment Z + coefficients . X`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mechanism", rename_all = "snake_case", deny_unknown_fields)]
pub enum Missingness {
    Mcar {
        rate: f64,
    },
    Mar {
        intercept: f64,
        #[serde(default)]
        treatment: f64,
        #[serde(default)]
        coefficients: Vec<f64>,
    },
}

impl Missingness {
    fn observed_probability(&self, x: &[f64], z: f64) -> f64 {
        match self {
            Self::Mcar { rate } => 1.0 - rate,
            Self::Mar {
                intercept,
                treatment,
                coefficients,
            } => {
                let eta = intercept
                    + treatment * z
                    + x.iter().enumerate().map(|(k, v)| coef(coefficients, k) * v).sum::<f64>();
                expit(eta)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DgpSpec {
    pub n: usize,
    pub pi: f64,
    #[serde(default)]
    pub covariates: Vec<CovariateLaw>,
    pub outcome: OutcomeModel,
    #[serde(default)]
    pub missingness: Option<Missingness>,
}

impl DgpSpec {
    pub fn covariate_names(&self) -> Vec<String> {
        (1..=self.covariates.len()).map(|k| format!("x{k}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.pi > 0.0 && self.pi < 1.0) {
            return Err(Error::config(
                "dgp.pi",
                format!("randomization probability must lie strictly between 0 and 1 (got {})", self.pi),
            ));
        }
        if self.n < 4 {
            return Err(Error::config("dgp.n", format!("at least 4 patients are needed (got {})", self.n)));
        }
        for (k, law) in self.covariates.iter().enumerate() {
            law.check(&format!("dgp.covariates[{k}]"))?;
        }
        let p = self.covariates.len();
        let o = &self.outcome;
        for (field, v) in [
            ("coefficients", &o.coefficients),
            ("quadratic", &o.quadratic),
            ("interactions", &o.interactions),
        ] {
            if v.len() > p {
                return Err(Error::config(
                    format!("dgp.outcome.{field}"),
                    format!("{} values given for {p} covariates", v.len()),
                ));
            }
        }
        if o.link == LinkFunction::Identity && !(o.noise_sd >= 0.0 && o.noise_sd.is_finite()) {
            return Err(Error::config("dgp.outcome.noise_sd", "must be finite and non-negative"));
        }
        match &self.missingness {
            Some(Missingness::Mcar { rate }) if !(0.0..1.0).contains(rate) => Err(Error::config(
                "dgp.missingness.rate",
                format!("must lie in [0, 1) (got {rate})"),
            )),
            Some(Missingness::Mar { coefficients, .. }) if coefficients.len() > p => Err(Error::config(
                "dgp.missingness.coefficients",
                format!("{} values given for {p} covariates", coefficients.len()),
            )),
            _ => Ok(()),
        }
    }

    pub fn outcome_kind(&self) -> OutcomeKind {
        match self.outcome.link {
            LinkFunction::Identity => OutcomeKind::Continuous,
            LinkFunction::Logit => OutcomeKind::Binary,
            LinkFunction::Log => OutcomeKind::Positive,
        }
    }
}

/// One simulated trial with both potential outcomes kept.
#[derive(Debug, Clone)]
pub struct SimulatedTrial {
    pub data: TrialDataset,
    pub y1: Vec<f64>,
    pub y0: Vec<f64>,
}

/// Draws one trial: covariates, arm by simple randomization, both
/// potential outcomes, then the observed outcome and its missingness.
pub fn simulate_trial<R: Rng>(spec: &DgpSpec, rng: &mut R) -> Result<SimulatedTrial> {
    let n = spec.n;
    let p = spec.covariates.len();
    let o = &spec.outcome;
    let noise = Normal::new(0.0, o.noise_sd.max(0.0)).map_err(|e| Error::config("dgp.outcome.noise_sd", e.to_string()))?;
    let mut x = Vec::with_capacity(n * p);
    let mut arm = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    let mut y1 = Vec::with_capacity(n);
    let mut y0 = Vec::with_capacity(n);
    let mut row = vec![0.0; p];
    for _ in 0..n {
        for (k, law) in spec.covariates.iter().enumerate() {
            row[k] = law.sample(rng);
        }
        let z = u8::from(rng.random::<f64>() < spec.pi);
        let (m1, m0) = (o.mean(&row, 1.0), o.mean(&row, 0.0));
        let (a, b) = match o.link {
            LinkFunction::Identity => {
                let e = noise.sample(rng);
                (m1 + e, m0 + e)
            }
            LinkFunction::Logit => {
                let u: f64 = rng.random();
                (f64::from(u8::from(u < m1)), f64::from(u8::from(u < m0)))
            }
            LinkFunction::Log => (poisson(m1, rng), poisson(m0, rng)),
        };
        let mut observed = if z == 1 { a } else { b };
        if let Some(m) = &spec.missingness {
            if rng.random::<f64>() >= m.observed_probability(&row, f64::from(z)) {
                observed = f64::NAN;
            }
        }
        x.extend_from_slice(&row);
        arm.push(z);
        y.push(observed);
        y1.push(a);
        y0.push(b);
    }
    let covariates = nalgebra::DMatrix::from_row_slice(n, p, &x);
    let data = TrialDataset::new(y, arm, covariates, spec.covariate_names())?;
    Ok(SimulatedTrial { data, y1, y0 })
}

fn poisson<R: Rng>(mean: f64, rng: &mut R) -> f64 {
    if mean <= 0.0 {
        return 0.0;
    }
    Poisson::new(mean).map_or(f64::NAN, |d| d.sample(rng))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TruthMethod {
    ClosedForm,
    Enumeration,
    MonteCarlo,
}

/// True marginal means and contrasts of a DGP, plus the conditional
/// treatment coefficient of the outcome model.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Truth {
    pub mu1: f64,
    pub mu0: f64,
    pub difference: f64,
    pub ratio: Option<f64>,
    pub odds_ratio: Option<f64>,
    pub conditional_treatment: f64,
    pub conditional_odds_ratio: Option<f64>,
    pub method: TruthMethod,
    /// Monte-Carlo standard errors of `mu1`, `mu0` and the difference when
    /// the truth is approximated.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mc_error: Option<[f64; 3]>,
}

impl Truth {
    fn from_means(spec: &DgpSpec, mu1: f64, mu0: f64, method: TruthMethod) -> Self {
        let in_unit = |m: f64| m > 0.0 && m < 1.0;
        let logit = spec.outcome.link == LinkFunction::Logit;
        Self {
            mu1,
            mu0,
            difference: mu1 - mu0,
            ratio: (mu0 > 0.0 && mu1 >= 0.0).then(|| mu1 / mu0),
            odds_ratio: (logit && in_unit(mu1) && in_unit(mu0))
                .then(|| (mu1 / (1.0 - mu1)) / (mu0 / (1.0 - mu0))),
            conditional_treatment: spec.outcome.treatment,
            conditional_odds_ratio: logit.then(|| spec.outcome.treatment.exp()),
            method,
            mc_error: None,
        }
    }

    pub fn contrast(&self, scale: Scale) -> Option<f64> {
        match scale {
            Scale::Difference => Some(self.difference),
            Scale::Ratio => self.ratio,
            Scale::OddsRatio => self.odds_ratio,
        }
    }
}

/// Exact marginal means: closed form for the identity link (and for the
/// log link when the moment generating functions are simple), exact
/// enumeration over the support when every covariate is Bernoulli.
pub fn true_estimands(spec: &DgpSpec) -> Result<Truth> {
    spec.validate()?;
    let o = &spec.outcome;
    let laws = &spec.covariates;
    let all_bernoulli = laws.iter().all(|l| matches!(l, CovariateLaw::Bernoulli { .. }));
    if o.link == LinkFunction::Identity {
        let m = |z: f64| {
            let mut e = o.intercept + o.treatment * z;
            for (k, law) in laws.iter().enumerate() {
                e += (coef(&o.coefficients, k) + z * coef(&o.interactions, k)) * law.mean()
                    + coef(&o.quadratic, k) * law.second_moment();
            }
            e
        };
        return Ok(Truth::from_means(spec, m(1.0), m(0.0), TruthMethod::ClosedForm));
    }
    if all_bernoulli && laws.len() <= MAX_ENUMERATED {
        let p = laws.len();
        let (mut m1, mut m0) = (0.0, 0.0);
        let mut x = vec![0.0; p];
        for mask in 0u32..(1u32 << p) {
            let mut prob = 1.0;
            for (k, law) in laws.iter().enumerate() {
                let CovariateLaw::Bernoulli { p: pk } = *law else { unreachable!() };
                let on = mask >> k & 1 == 1;
                x[k] = f64::from(u8::from(on));
                prob *= if on { pk } else { 1.0 - pk };
            }
            if prob > 0.0 {
                m1 += prob * o.mean(&x, 1.0);
                m0 += prob * o.mean(&x, 0.0);
            }
        }
        return Ok(Truth::from_means(spec, m1, m0, TruthMethod::Enumeration));
    }
    if o.link == LinkFunction::Log {
        let m = |z: f64| -> Option<f64> {
            let mut e = (o.intercept + o.treatment * z).exp();
            for (k, law) in laws.iter().enumerate() {
                let b = coef(&o.coefficients, k) + z * coef(&o.interactions, k);
                e *= law.exp_moment(b, coef(&o.quadratic, k))?;
            }
            Some(e)
        };
        if let (Some(m1), Some(m0)) = (m(1.0), m(0.0)) {
            return Ok(Truth::from_means(spec, m1, m0, TruthMethod::ClosedForm));
        }
    }
    Err(Error::NotEnumerable(format!(
        "{} link with continuous covariates",
        o.link.name()
    )))
}

/// Monte-Carlo approximation of the marginal means from `draws` covariate
/// vectors, averaging the conditional means rather than simulated outcomes.
pub fn monte_carlo_truth(spec: &DgpSpec, draws: usize, seed: u64) -> Result<Truth> {
    spec.validate()?;
    const CHUNK: usize = 100_000;
    let chunks = draws.div_ceil(CHUNK);
    let sums: Vec<[f64; 6]> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(c as u64);
            let len = CHUNK.min(draws - c * CHUNK);
            let mut x = vec![0.0; spec.covariates.len()];
            let mut s = [0.0; 6];
            for _ in 0..len {
                for (k, law) in spec.covariates.iter().enumerate() {
                    x[k] = law.sample(&mut rng);
                }
                let a = spec.outcome.mean(&x, 1.0);
                let b = spec.outcome.mean(&x, 0.0);
                let d = a - b;
                s[0] += a;
                s[1] += a * a;
                s[2] += b;
                s[3] += b * b;
                s[4] += d;
                s[5] += d * d;
            }
            s
        })
        .collect();
    let mut tot = [0.0; 6];
    for s in &sums {
        for k in 0..6 {
            tot[k] += s[k];
        }
    }
    let nd = draws as f64;
    let err = |s: f64, ss: f64| ((ss / nd - (s / nd).powi(2)).max(0.0) / nd).sqrt();
    let (m1, m0) = (tot[0] / nd, tot[2] / nd);
    let mut truth = Truth::from_means(spec, m1, m0, TruthMethod::MonteCarlo);
    if spec.outcome.treatment == 0.0 && spec.outcome.interactions.iter().all(|&g| g == 0.0) {
        truth.difference = 0.0;
    }
    truth.mc_error = Some([err(tot[0], tot[1]), err(tot[2], tot[3]), err(tot[4], tot[5])]);
    Ok(truth)
}

/// Exact truth when available, otherwise the Monte-Carlo approximation.
pub fn resolve_truth(spec: &DgpSpec, draws: usize, seed: u64) -> Result<Truth> {
    match true_estimands(spec) {
        Err(Error::NotEnumerable(_)) => monte_carlo_truth(spec, draws, seed),
        other => other,
    }
}

/// Runs `f` once per replicate with the replicate's own random stream and
/// returns the results in replicate order. `jobs = Some(1)` runs serially on
/// the calling thread; `None` uses the global thread pool.
pub fn replicate_map<T, F>(replicates: usize, seed: u64, jobs: Option<usize>, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize, &mut ChaCha8Rng) -> T + Sync,
{
    let run = |r: usize| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(r as u64);
        f(r, &mut rng)
    };
    match jobs {
        Some(1) => Ok((0..replicates).map(run).collect()),
        Some(0) => Err(Error::config("jobs", "must be at least 1")),
        Some(k) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(k)
                .build()
                .map_err(|e| Error::config("jobs", e.to_string()))?;
            Ok(pool.install(|| (0..replicates).into_par_iter().map(run).collect()))
        }
        None => Ok((0..replicates).into_par_iter().map(run).collect()),
    }
}

/// A Monte-Carlo study: the DGP, the estimators compared and how each
/// replicate is analysed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    pub dgp: DgpSpec,
    pub estimators: Vec<EstimatorSpec>,
    pub replicates: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_scale")]
    pub scale: Scale,
    #[serde(default = "default_variance")]
    pub variance: VarianceMethod,
    #[serde(default = "default_bootstrap")]
    pub bootstrap_replicates: usize,
    #[serde(default = "default_level")]
    pub ci_level: f64,
    #[serde(default)]
    pub imputation: Option<ImputationPlan>,
    /// Covariate draws for an approximated truth.
    #[serde(default = "default_truth_draws")]
    pub truth_draws: usize,
}

fn default_seed() -> u64 {
    crate::inference::DEFAULT_SEED
}
fn default_scale() -> Scale {
    Scale::Difference
}
fn default_variance() -> VarianceMethod {
    VarianceMethod::Influence
}
fn default_bootstrap() -> usize {
    1000
}
fn default_level() -> f64 {
    0.95
}
fn default_truth_draws() -> usize {
    TRUTH_DRAWS
}

impl SimulationConfig {
    pub fn new(dgp: DgpSpec, estimators: Vec<EstimatorSpec>, replicates: usize, seed: u64) -> Self {
        Self {
            dgp,
            estimators,
            replicates,
            seed,
            scale: default_scale(),
            variance: default_variance(),
            bootstrap_replicates: default_bootstrap(),
            ci_level: default_level(),
            imputation: None,
            truth_draws: default_truth_draws(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.dgp.validate()?;
        if self.replicates < 100 {
            return Err(Error::config(
                "replicates",
                format!("at least 100 replicates are needed (got {})", self.replicates),
            ));
        }
        if !(self.ci_level > 0.0 && self.ci_level < 1.0) {
            return Err(Error::config("ci_level", "must lie strictly between 0 and 1"));
        }
        let resampling = matches!(self.variance, VarianceMethod::Bootstrap | VarianceMethod::Bca);
        if resampling && self.bootstrap_replicates < crate::inference::MIN_BOOTSTRAP_REPLICATES {
            return Err(Error::config(
                "bootstrap_replicates",
                format!(
                    "at least {} bootstrap replicates are required",
                    crate::inference::MIN_BOOTSTRAP_REPLICATES
                ),
            ));
        }
        check_estimators(&self.estimators)?;
        let names = self.dgp.covariate_names();
        for s in &self.estimators {
            s.to_config()?.formula.validate(&names)?;
        }
        crate::data::check_scale_kind(self.scale, self.dgp.outcome_kind())
    }
}

/// Estimate from one replicate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReplicateEstimate {
    pub point: f64,
    pub se: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub p_value: f64,
    /// Treatment coefficient and its model-based standard error.
    pub conditional: Option<(f64, f64)>,
}

/// Monte-Carlo standard errors of the summaries.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct McErrors {
    pub mean: f64,
    pub empirical_sd: f64,
    pub mean_se: f64,
    pub coverage: f64,
    pub rejection_rate: f64,
    pub relative_efficiency: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConditionalSummary {
    pub mean: f64,
    pub empirical_sd: f64,
    pub mean_se: f64,
    pub rejection_rate: f64,
    pub rejection_rate_mc_error: f64,
    /// Share of replicates where the coefficient test and the marginal test
    /// reach the same decision in the same direction.
    pub agreement_with_marginal: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimatorSummary {
    pub name: String,
    pub method: Method,
    pub link: LinkFunction,
    pub formula: String,
    pub successes: usize,
    pub failures: usize,
    pub mean: f64,
    pub bias: f64,
    pub empirical_sd: f64,
    pub mean_se: f64,
    pub coverage: f64,
    pub rejection_rate: f64,
    /// Empirical variance relative to the unadjusted estimator.
    pub relative_efficiency: f64,
    pub sample_size_reduction: f64,
    pub mc_standard_errors: McErrors,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub conditional: Option<ConditionalSummary>,
    /// Failed replicates by error kind.
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub failure_kinds: BTreeMap<&'static str, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MonteCarloReport {
    pub schema_version: &'static str,
    pub replicates: usize,
    pub seed: u64,
    pub n: usize,
    pub scale: Scale,
    pub ci_level: f64,
    pub variance_method: VarianceMethod,
    pub truth: Truth,
    pub reference_empirical_sd: f64,
    pub estimators: Vec<EstimatorSummary>,
    /// Per-replicate estimates, `[replicate][estimator]`.
    #[serde(skip)]
    pub per_replicate: Vec<Vec<Option<ReplicateEstimate>>>,
}

pub const SIMULATION_SCHEMA: &str = "covadj.simulation/1";

impl MonteCarloReport {
    pub fn estimator(&self, name: &str) -> Option<&EstimatorSummary> {
        self.estimators.iter().find(|e| e.name == name)
    }

    /// Writes per-replicate estimates as CSV, one row per replicate and
    /// estimator; failed fits leave the numeric fields empty.
    pub fn write_replicates_csv<W: Write>(&self, writer: W) -> Result<()> {
        let io = |e: csv::Error| Error::Io {
            path: "per-replicate CSV".into(),
            message: e.to_string(),
        };
        let mut w = csv::Writer::from_writer(writer);
        w.write_record([
            "replicate",
            "estimator",
            "point",
            "se",
            "ci_low",
            "ci_high",
            "p_value",
            "conditional_estimate",
            "conditional_se",
        ])
        .map_err(io)?;
        let f = |v: f64| format!("{v:?}");
        for (r, row) in self.per_replicate.iter().enumerate() {
            for (e, est) in row.iter().enumerate() {
                let mut rec = vec![r.to_string(), self.estimators[e].name.clone()];
                match est {
                    Some(x) => {
                        rec.extend([f(x.point), f(x.se), f(x.ci_low), f(x.ci_high), f(x.p_value)]);
                        match x.conditional {
                            Some((b, s)) => rec.extend([f(b), f(s)]),
                            None => rec.extend([String::new(), String::new()]),
                        }
                    }
                    None => rec.extend(std::iter::repeat_n(String::new(), 7)),
                }
                w.write_record(&rec).map_err(io)?;
            }
        }
        w.flush().map_err(|e| Error::Io {
            path: "per-replicate CSV".into(),
            message: e.to_string(),
        })
    }
}

struct Prepared {
    spec: EstimatorSpec,
    config: EstimatorConfig,
}

fn analyse_replicate(
    data: &TrialDataset,
    est: &Prepared,
    plan: Option<&ImputationPlan>,
    estimand: EstimandSpec,
    options: &InferenceOptions,
) -> Result<ReplicateEstimate> {
    let (means, _) = estimate_with_plan(data, &est.config, plan)?;
    let f = |d: &TrialDataset| estimate_with_plan(d, &est.config, plan).map(|(m, _)| m);
    let resampling = Resampling::new(&f, est.config.params_per_arm());
    let r = infer_from_means(data, resampling, &means, estimand, options)?;
    Ok(ReplicateEstimate {
        point: r.point,
        se: r.se,
        ci_low: r.ci_low,
        ci_high: r.ci_high,
        p_value: r.p_value,
        conditional: means.conditional.map(|c| (c.estimate, c.std_error)),
    })
}

/// Difference in (complete-case) arm means, the reference for relative
/// efficiency.
fn reference_estimate(data: &TrialDataset, scale: Scale) -> Result<f64> {
    let means = if data.has_missing_outcome() {
        mar_standardization(data, &ModelFormula::intercept_only(), LinkFunction::Identity)?
    } else {
        estimate_unadjusted(data)?
    };
    means.contrast(scale)
}

struct ReplicateOutput {
    estimates: Vec<Option<ReplicateEstimate>>,
    errors: Vec<Option<&'static str>>,
    reference: Option<f64>,
}

fn decision(p: f64, direction: f64, alpha: f64) -> i8 {
    if p < alpha {
        if direction > 0.0 {
            1
        } else {
            -1
        }
    } else {
        0
    }
}

fn rate_error(rate: f64, count: usize) -> f64 {
    (rate * (1.0 - rate) / count as f64).sqrt()
}

/// Simulates `config.replicates` trials, analyses each with every
/// configured estimator and summarizes bias, spread, calibration and
/// efficiency against the unadjusted estimator.
pub fn run_monte_carlo(config: &SimulationConfig, jobs: Option<usize>) -> Result<MonteCarloReport> {
    config.validate()?;
    let truth = resolve_truth(&config.dgp, config.truth_draws, config.seed ^ 0x0074_7275_7468)?;
    let prepared: Vec<Prepared> = config
        .estimators
        .iter()
        .map(|s| {
            Ok(Prepared {
                spec: s.clone(),
                config: s.to_config()?,
            })
        })
        .collect::<Result<_>>()?;
    let estimand = EstimandSpec::new(config.scale, config.dgp.outcome_kind());
    let scale = config.scale;
    let plan = config.imputation.as_ref();

    let outputs = replicate_map(config.replicates, config.seed, jobs, |_, rng| {
        let trial = match simulate_trial(&config.dgp, rng) {
            Ok(t) => t,
            Err(e) => {
                return ReplicateOutput {
                    estimates: vec![None; prepared.len()],
                    errors: vec![Some(e.kind()); prepared.len()],
                    reference: None,
                }
            }
        };
        let options = InferenceOptions {
            method: config.variance,
            bootstrap_replicates: config.bootstrap_replicates,
            seed: rng.random(),
            ci_level: config.ci_level,
        };
        let mut estimates = Vec::with_capacity(prepared.len());
        let mut errors = Vec::with_capacity(prepared.len());
        for est in &prepared {
            match analyse_replicate(&trial.data, est, plan, estimand, &options) {
                Ok(r) => {
                    estimates.push(Some(r));
                    errors.push(None);
                }
                Err(e) => {
                    estimates.push(None);
                    errors.push(Some(e.kind()));
                }
            }
        }
        ReplicateOutput {
            estimates,
            errors,
            reference: reference_estimate(&trial.data, scale).ok(),
        }
    })?;

    let total = config.replicates;
    for (e, est) in prepared.iter().enumerate() {
        let failed = outputs.iter().filter(|o| o.estimates[e].is_none()).count();
        if failed as f64 > MAX_REPLICATE_FAILURES * total as f64 {
            return Err(Error::ExcessiveReplicateFailures {
                name: est.spec.label(),
                failed,
                total,
            });
        }
    }

    let references: Vec<f64> = outputs.iter().filter_map(|o| o.reference).collect();
    let reference_sd = sample_sd(&references);
    let alpha = 1.0 - config.ci_level;
    let target = truth.contrast(scale);
    let null = to_direction_scale(scale.null_value(), scale);

    let mut summaries = Vec::with_capacity(prepared.len());
    for (e, est) in prepared.iter().enumerate() {
        let ok: Vec<&ReplicateEstimate> = outputs.iter().filter_map(|o| o.estimates[e].as_ref()).collect();
        let m = ok.len();
        let points: Vec<f64> = ok.iter().map(|r| r.point).collect();
        let ses: Vec<f64> = ok.iter().map(|r| r.se).collect();
        let mean_point = mean(&points);
        let sd = sample_sd(&points);
        let coverage = target.map_or(f64::NAN, |t| {
            ok.iter().filter(|r| r.ci_low <= t && t <= r.ci_high).count() as f64 / m as f64
        });
        let rejection = ok.iter().filter(|r| r.p_value < alpha).count() as f64 / m as f64;

        // paired with the reference on replicates where both succeeded
        let (a, b): (Vec<f64>, Vec<f64>) = outputs
            .iter()
            .filter_map(|o| Some((o.estimates[e]?.point, o.reference?)))
            .unzip();
        let va = sample_variance(&a);
        let vb = sample_variance(&b);
        let re = va / vb;
        let rho = correlation(&a, &b);
        let re_err = re * 2.0 * ((1.0 - rho * rho).max(0.0) / a.len() as f64).sqrt();

        let conditional = ok.iter().all(|r| r.conditional.is_some()).then(|| {
            let coefs: Vec<f64> = ok.iter().map(|r| r.conditional.unwrap().0).collect();
            let cses: Vec<f64> = ok.iter().map(|r| r.conditional.unwrap().1).collect();
            let mut rejected = 0usize;
            let mut agree = 0usize;
            for r in &ok {
                let (b, s) = r.conditional.unwrap();
                let pc = crate::stats::two_sided_p(b / s);
                let dc = decision(pc, b, alpha);
                let dm = decision(r.p_value, to_direction_scale(r.point, scale) - null, alpha);
                rejected += usize::from(dc != 0);
                agree += usize::from(dc == dm);
            }
            let rate = rejected as f64 / m as f64;
            ConditionalSummary {
                mean: mean(&coefs),
                empirical_sd: sample_sd(&coefs),
                mean_se: mean(&cses),
                rejection_rate: rate,
                rejection_rate_mc_error: rate_error(rate, m),
                agreement_with_marginal: agree as f64 / m as f64,
            }
        });

        let mut failure_kinds = BTreeMap::new();
        for kind in outputs.iter().filter_map(|o| o.errors[e]) {
            *failure_kinds.entry(kind).or_insert(0) += 1;
        }
        summaries.push(EstimatorSummary {
            name: est.spec.label(),
            method: est.config.method,
            link: est.config.link,
            formula: est.config.formula.to_string(),
            successes: m,
            failures: total - m,
            mean: mean_point,
            bias: target.map_or(f64::NAN, |t| mean_point - t),
            empirical_sd: sd,
            mean_se: mean(&ses),
            coverage,
            rejection_rate: rejection,
            relative_efficiency: re,
            sample_size_reduction: 1.0 - re,
            mc_standard_errors: McErrors {
                mean: sd / (m as f64).sqrt(),
                empirical_sd: sd / (2.0 * (m as f64 - 1.0)).sqrt(),
                mean_se: sample_sd(&ses) / (m as f64).sqrt(),
                coverage: rate_error(coverage, m),
                rejection_rate: rate_error(rejection, m),
                relative_efficiency: re_err,
            },
            conditional,
            failure_kinds,
        });
    }

    Ok(MonteCarloReport {
        schema_version: SIMULATION_SCHEMA,
        replicates: total,
        seed: config.seed,
        n: config.dgp.n,
        scale,
        ci_level: config.ci_level,
        variance_method: config.variance,
        truth,
        reference_empirical_sd: reference_sd,
        estimators: summaries,
        per_replicate: outputs.into_iter().map(|o| o.estimates).collect(),
    })
}

fn to_direction_scale(v: f64, scale: Scale) -> f64 {
    if scale.is_multiplicative() {
        v.ln()
    } else {
        v
    }
}

fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let (ma, mb) = (mean(a), mean(b));
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    sab / (saa * sbb).sqrt()
}
