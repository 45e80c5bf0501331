use std::hint::black_box;

use covadj_core::estimators::{estimate, EstimatorConfig, Method};
use covadj_core::inference::{bca_interval, bootstrap_variance};
use covadj_core::simulation::{CovariateLaw, DgpSpec, OutcomeModel};
use covadj_core::{fit_glm, simulate_trial, LinkFunction, ModelFormula, Scale, TrialDataset};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn trial(n: usize, p: usize, link: LinkFunction) -> TrialDataset {
    let spec = DgpSpec {
        n,
        pi: 0.5,
        covariates: vec![CovariateLaw::Normal { mean: 0.0, sd: 1.0 }; p],
        outcome: OutcomeModel {
            link,
            intercept: -0.3,
            treatment: 0.5,
            coefficients: vec![0.4; p],
            quadratic: vec![],
            interactions: vec![],
            noise_sd: 1.0,
        },
        missingness: None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    simulate_trial(&spec, &mut rng).unwrap().data
}

fn terms(p: usize) -> ModelFormula {
    let names: Vec<String> = (1..=p).map(|k| format!("x{k}")).collect();
    let refs: Vec<&str> = names.iter().map(String::as_str).collect();
    ModelFormula::parse(&refs).unwrap()
}

fn irls(c: &mut Criterion) {
    let mut g = c.benchmark_group("irls_logit");
    for &(n, p) in &[(500, 5), (5000, 5), (5000, 20)] {
        let data = trial(n, p, LinkFunction::Logit);
        let mut x = DMatrix::from_element(n, p + 2, 1.0);
        for i in 0..n {
            x[(i, 1)] = f64::from(data.arm()[i]);
            for k in 0..p {
                x[(i, k + 2)] = data.covariates()[(i, k)];
            }
        }
        g.bench_with_input(BenchmarkId::from_parameter(format!("n{n}_p{p}")), &x, |b, x| {
            b.iter(|| fit_glm(black_box(data.outcome()), x, LinkFunction::Logit, None).unwrap())
        });
    }
    g.finish();
}

fn point_estimates(c: &mut Criterion) {
    let data = trial(2000, 5, LinkFunction::Logit);
    let mut g = c.benchmark_group("estimate_n2000_p5");
    for method in [
        Method::Unadjusted,
        Method::Ancova,
        Method::Anhecova,
        Method::StandardizationSeparate,
        Method::StandardizationPooled,
        Method::Ipw,
        Method::AipwGeneral,
    ] {
        let link = match method {
            Method::Ancova | Method::Anhecova | Method::Ipw | Method::Unadjusted => LinkFunction::Identity,
            _ => LinkFunction::Logit,
        };
        let config = if method == Method::Unadjusted {
            EstimatorConfig::unadjusted()
        } else {
            EstimatorConfig::new(method, terms(5), link).unwrap()
        };
        g.bench_function(method.name(), |b| b.iter(|| estimate(black_box(&data), &config).unwrap()));
    }
    g.finish();
}

fn resampling(c: &mut Criterion) {
    let data = trial(500, 3, LinkFunction::Logit);
    let config = EstimatorConfig::new(Method::StandardizationSeparate, terms(3), LinkFunction::Logit).unwrap();
    let mut g = c.benchmark_group("resampling_n500");
    g.sample_size(10);
    g.bench_function("bootstrap_b1000", |b| {
        b.iter(|| bootstrap_variance(&data, &config, Scale::Difference, 1000, 7, 0.95).unwrap())
    });
    g.bench_function("bca_b1000", |b| {
        b.iter(|| bca_interval(&data, &config, Scale::OddsRatio, 1000, 7, 0.95).unwrap())
    });
    g.finish();
}

criterion_group!(benches, irls, point_estimates, resampling);
criterion_main!(benches);
