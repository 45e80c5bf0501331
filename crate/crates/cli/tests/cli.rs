use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

const STRATA: &str = "y,z,x\n1,1,1\n1,1,1\n1,1,0\n0,1,0\n1,0,1\n0,0,1\n0,0,0\n0,0,0\n";

fn covadj(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_covadj"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write(dir: &TempDir, name: &str, text: &str) -> PathBuf {
    let p = dir.path().join(name);
    fs::write(&p, text).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stderr).expect("structured error on stderr")
}

fn schema(name: &str) -> jsonschema::Validator {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../schemas").join(name);
    let schema: Value = serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap();
    jsonschema::validator_for(&schema).expect("valid schema")
}

fn assert_conforms(schema_file: &str, doc: &Value) {
    let v = schema(schema_file);
    let errors: Vec<String> = v.iter_errors(doc).map(|e| format!("{} at {}", e, e.instance_path())).collect();
    assert!(errors.is_empty(), "{schema_file}: {errors:#?}");
}

const ANALYSIS: &str = r#"{
    "data": {"outcome": "y", "arm": "z", "covariates": ["x"]},
    "estimand": {"outcome_kind": "binary", "scales": ["difference"]},
    "estimators": [{"method": "standardization_separate", "terms": ["x"], "primary": true}]
}"#;

#[test]
fn analyze_saturated_strata() {
    let dir = TempDir::new().unwrap();
    let data = write(&dir, "d.csv", STRATA);
    let config = write(&dir, "c.json", ANALYSIS);
    let out = covadj(&["analyze", "--config", s(&config), "--data", s(&data)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    let e = &report["estimators"][0];
    assert_eq!(e["mu1"], 0.75);
    assert_eq!(e["mu0"], 0.25);
    assert_eq!(e["results"][0]["estimate"], 0.5);
    assert_conforms("analysis-report.schema.json", &report);
}

#[test]
fn odds_ratio_on_continuous_outcome_exits_1() {
    let dir = TempDir::new().unwrap();
    let data = write(&dir, "d.csv", STRATA);
    let text = ANALYSIS
        .replace("binary", "continuous")
        .replace(r#"["difference"]"#, r#"["odds_ratio"]"#);
    let config = write(&dir, "c.json", &text);
    let out = covadj(&["analyze", "--config", s(&config), "--data", s(&data)]);
    assert_eq!(out.status.code(), Some(1));
    let err = stderr_json(&out);
    assert_eq!(err["error"]["kind"], "ScaleOutcomeMismatch");
    assert!(err["error"]["hint"].is_string());
    assert_conforms("error.schema.json", &err);
}

#[test]
fn exit_codes_follow_error_category() {
    let dir = TempDir::new().unwrap();
    let config = write(&dir, "c.json", ANALYSIS);
    // unreadable data: 2
    let out = covadj(&["analyze", "--config", s(&config), "--data", "/nonexistent.csv"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stderr_json(&out)["error"]["category"], "data");
    // separated logit fit: 3
    let data = write(&dir, "sep.csv", "y,z,x\n0,1,0\n0,1,1\n1,1,2\n1,1,3\n0,0,0\n0,0,1\n1,0,2\n1,0,3\n");
    let text = ANALYSIS.replace(r#""primary": true"#, r#""link": "logit""#);
    let config = write(&dir, "logit.json", &text);
    let out = covadj(&["analyze", "--config", s(&config), "--data", s(&data)]);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(stderr_json(&out)["error"]["kind"], "Separation");
    // bootstrap on too few patients: 4
    let data = write(&dir, "d.csv", STRATA);
    let text = ANALYSIS.replace(
        r#""primary": true}]"#,
        r#""primary": true}], "inference": {"method": "bootstrap", "bootstrap_replicates": 200}"#,
    );
    let config = write(&dir, "boot.json", &text);
    let out = covadj(&["analyze", "--config", s(&config), "--data", s(&data)]);
    assert_eq!(out.status.code(), Some(4));
    // unknown config key: 1
    let config = write(&dir, "bad.json", &ANALYSIS.replace("estimand", "estimnad"));
    let out = covadj(&["analyze", "--config", s(&config), "--data", s(&data)]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn analyze_is_byte_identical_across_runs() {
    let dir = TempDir::new().unwrap();
    let rows: String = (0..60)
        .map(|i| {
            let x = (i % 7) as f64 / 3.0;
            let z = i % 2;
            let y = x + z as f64 + ((i * 37) % 11) as f64 / 10.0;
            format!("{y},{z},{x}\n")
        })
        .collect();
    let data = write(&dir, "d.csv", &format!("y,z,x\n{rows}"));
    let text = ANALYSIS.replace("binary", "continuous").replace(
        r#""primary": true}]"#,
        r#""primary": true}], "inference": {"method": "bca", "bootstrap_replicates": 400, "seed": 3}"#,
    );
    let config = write(&dir, "c.json", &text);
    let a = dir.path().join("a.json");
    let b = dir.path().join("b.json");
    for out in [&a, &b] {
        let o = covadj(&["analyze", "--config", s(&config), "--data", s(&data), "--out", s(out)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        assert!(String::from_utf8_lossy(&o.stdout).contains("[primary]"));
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
}

const SIMULATION: &str = r#"{
    "dgp": {
        "n": 120,
        "pi": 0.5,
        "covariates": [{"law": "bernoulli", "p": 0.5}],
        "outcome": {"link": "logit", "intercept": -1.0, "treatment": 0.0, "coefficients": [2.0]}
    },
    "estimators": [
        {"method": "unadjusted"},
        {"method": "standardization_pooled", "terms": ["x1"], "link": "logit"}
    ],
    "replicates": 100,
    "seed": 17
}"#;

#[test]
fn simulate_is_independent_of_jobs() {
    let dir = TempDir::new().unwrap();
    let config = write(&dir, "sim.json", SIMULATION);
    let mut reports = Vec::new();
    for jobs in ["1", "8"] {
        let out = dir.path().join(format!("r{jobs}.json"));
        let csv = dir.path().join(format!("r{jobs}.csv"));
        let o = covadj(&[
            "simulate",
            "--config",
            s(&config),
            "--jobs",
            jobs,
            "--out",
            s(&out),
            "--replicates-csv",
            s(&csv),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        reports.push((fs::read(&out).unwrap(), fs::read(&csv).unwrap()));
    }
    assert_eq!(reports[0], reports[1]);
    let doc: Value = serde_json::from_slice(&reports[0].0).unwrap();
    assert_eq!(doc["truth"]["method"], "enumeration");
    assert_conforms("simulation-report.schema.json", &doc);
}

#[test]
fn invalid_pi_exits_1_naming_the_field() {
    let dir = TempDir::new().unwrap();
    let config = write(&dir, "sim.json", &SIMULATION.replace(r#""pi": 0.5"#, r#""pi": 1.2"#));
    let out = covadj(&["simulate", "--config", s(&config)]);
    assert_eq!(out.status.code(), Some(1));
    let err = stderr_json(&out);
    assert_eq!(err["error"]["field"], "dgp.pi");
}

#[test]
fn toml_simulation_config() {
    let dir = TempDir::new().unwrap();
    let text = r#"
        replicates = 100
        seed = 2

        [dgp]
        n = 80
        pi = 0.5

        [[dgp.covariates]]
        law = "uniform"
        low = 0.0
        high = 1.0

        [dgp.outcome]
        link = "identity"
        intercept = 0.0
        treatment = 1.0
        coefficients = [2.0]

        [[estimators]]
        method = "ancova"
        terms = ["x1"]
    "#;
    let config = write(&dir, "sim.toml", text);
    let out = covadj(&["simulate", "--config", s(&config), "--jobs", "2"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let doc: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(doc["truth"]["difference"], 1.0);
    assert_eq!(doc["truth"]["method"], "closed_form");
}

fn findings(out: &Output) -> Vec<Value> {
    let doc: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_conforms("validation-report.schema.json", &doc);
    doc["findings"].as_array().unwrap().clone()
}

#[test]
fn validate_clean_inputs() {
    let dir = TempDir::new().unwrap();
    let rows: String = (0..40).map(|i| format!("{},{},{}\n", i % 3, i % 2, (i * 7) % 5)).collect();
    let data = write(&dir, "d.csv", &format!("y,z,x\n{rows}"));
    let config = write(&dir, "c.json", &ANALYSIS.replace("binary", "continuous"));
    let out = covadj(&["validate", "--config", s(&config), "--data", s(&data)]);
    assert_eq!(out.status.code(), Some(0));
    assert!(findings(&out).is_empty());
}

#[test]
fn validate_reports_missingness_and_collinearity() {
    let dir = TempDir::new().unwrap();
    let mut rows = String::new();
    for i in 0..40 {
        let a = (i * 7 % 5) as f64;
        let w = if i % 2 == 0 { String::new() } else { format!("{}", i % 3) };
        rows.push_str(&format!("{},{},{a},{},{w}\n", i % 4, i % 2, 2.0 * a));
    }
    let data = write(&dir, "d.csv", &format!("y,z,a,b,w\n{rows}"));
    let text = r#"{
        "data": {"outcome": "y", "arm": "z", "covariates": ["a", "b", "w"]},
        "estimand": {"outcome_kind": "continuous"},
        "estimators": [{"method": "ancova", "terms": ["a", "b"]}]
    }"#;
    let config = write(&dir, "c.json", text);
    let out = covadj(&["validate", "--config", s(&config), "--data", s(&data)]);
    assert_eq!(out.status.code(), Some(0));
    let f = findings(&out);
    let codes: Vec<&str> = f.iter().map(|x| x["code"].as_str().unwrap()).collect();
    assert!(codes.contains(&"HighMissingness"), "{codes:?}");
    assert!(codes.contains(&"RankDeficientDesign"), "{codes:?}");
    let miss = f.iter().find(|x| x["code"] == "HighMissingness").unwrap();
    assert_eq!(miss["severity"], "warning");
    assert!(miss["message"].as_str().unwrap().contains("exclud"));
}

#[test]
fn shipped_example_configs_run() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("r.json");
    let o = covadj(&[
        "analyze",
        "--config",
        s(&root.join("analysis.json")),
        "--data",
        s(&root.join("trial.csv")),
        "--out",
        s(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let doc: Value = serde_json::from_slice(&fs::read(&out).unwrap()).unwrap();
    assert_conforms("analysis-report.schema.json", &doc);
    assert!(doc["estimators"][0]["imputation"].is_object());
    let formula = doc["estimators"][0]["formula"].as_str().unwrap();
    assert!(formula.contains("biomarker_missing"), "{formula}");
    let o = covadj(&["validate", "--config", s(&root.join("analysis.toml")), "--data", s(&root.join("trial.csv"))]);
    assert!(o.status.success());
}
