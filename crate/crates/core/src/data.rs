//! Trial datasets, estimand choices, model formulas and CSV ingestion.

use std::collections::HashSet;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Deserializer, Serialize};

use crate::error::{Arm, Error, Result};

/// Outcome, arm and baseline covariates of a two-arm trial.
///
/// Missing entries are stored as `NaN` and flagged in the corresponding mask.
/// The dataset is immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialDataset {
    outcome: Vec<f64>,
    arm: Vec<u8>,
    covariates: DMatrix<f64>,
    covariate_names: Vec<String>,
    outcome_missing: Vec<bool>,
    covariate_missing: DMatrix<bool>,
}

impl TrialDataset {
    /// Builds and validates a dataset. `NaN` entries in `outcome` or
    /// `covariates` are treated as missing.
    pub fn new(
        outcome: Vec<f64>,
        arm: Vec<u8>,
        covariates: DMatrix<f64>,
        covariate_names: Vec<String>,
    ) -> Result<Self> {
        let n = outcome.len();
        if arm.len() != n {
            return Err(Error::InvalidDataset(format!(
                "outcome has {n} rows but arm has {}",
                arm.len()
            )));
        }
        if covariates.nrows() != n {
            return Err(Error::InvalidDataset(format!(
                "outcome has {n} rows but covariate matrix has {}",
                covariates.nrows()
            )));
        }
        if covariates.ncols() != covariate_names.len() {
            return Err(Error::InvalidDataset(format!(
                "{} covariate columns but {} names",
                covariates.ncols(),
                covariate_names.len()
            )));
        }
        let mut seen = HashSet::new();
        for name in &covariate_names {
            if !seen.insert(name.as_str()) {
                return Err(Error::InvalidDataset(format!(
                    "duplicate covariate name `{name}`"
                )));
            }
        }
        if let Some(row) = arm.iter().position(|&a| a > 1) {
            return Err(Error::NonBinaryArm {
                column: "arm".into(),
                row: row + 1,
                value: arm[row].to_string(),
            });
        }
        let n1 = arm.iter().filter(|&&a| a == 1).count();
        if n1 == 0 {
            return Err(Error::EmptyArm { arm: Arm::Treated });
        }
        if n1 == n {
            return Err(Error::EmptyArm { arm: Arm::Control });
        }
        if outcome.iter().any(|y| y.is_infinite()) || covariates.iter().any(|x| x.is_infinite()) {
            return Err(Error::InvalidDataset("infinite values are not allowed".into()));
        }
        let outcome_missing = outcome.iter().map(|y| y.is_nan()).collect();
        let covariate_missing = covariates.map(|x| x.is_nan());
        Ok(Self {
            outcome,
            arm,
            covariates,
            covariate_names,
            outcome_missing,
            covariate_missing,
        })
    }

    /// Dataset without covariates.
    pub fn without_covariates(outcome: Vec<f64>, arm: Vec<u8>) -> Result<Self> {
        let n = outcome.len();
        Self::new(outcome, arm, DMatrix::zeros(n, 0), Vec::new())
    }

    pub fn n(&self) -> usize {
        self.outcome.len()
    }

    pub fn n_treated(&self) -> usize {
        self.arm.iter().filter(|&&a| a == 1).count()
    }

    pub fn n_control(&self) -> usize {
        self.n() - self.n_treated()
    }

    /// Empirical randomization probability `n1 / n`.
    pub fn pi_hat(&self) -> f64 {
        self.n_treated() as f64 / self.n() as f64
    }

    pub fn outcome(&self) -> &[f64] {
        &self.outcome
    }

    pub fn arm(&self) -> &[u8] {
        &self.arm
    }

    pub fn covariates(&self) -> &DMatrix<f64> {
        &self.covariates
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn outcome_missing(&self) -> &[bool] {
        &self.outcome_missing
    }

    pub fn covariate_missing(&self) -> &DMatrix<bool> {
        &self.covariate_missing
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.covariate_names.iter().position(|c| c == name)
    }

    pub fn has_missing_outcome(&self) -> bool {
        self.outcome_missing.iter().any(|&m| m)
    }

    pub fn has_missing_covariates(&self) -> bool {
        self.covariate_missing.iter().any(|&m| m)
    }

    /// Fraction of missing entries per covariate column.
    pub fn covariate_missing_rates(&self) -> Vec<f64> {
        let n = self.n() as f64;
        self.covariate_missing
            .column_iter()
            .map(|col| col.iter().filter(|&&m| m).count() as f64 / n)
            .collect()
    }

    /// Row indices belonging to one arm.
    pub fn arm_rows(&self, arm: Arm) -> Vec<usize> {
        let z = arm.indicator();
        (0..self.n()).filter(|&i| self.arm[i] == z).collect()
    }

    /// Dataset made of the given rows, in order; rows may repeat.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        let outcome = rows.iter().map(|&i| self.outcome[i]).collect();
        let arm = rows.iter().map(|&i| self.arm[i]).collect();
        let p = self.covariates.ncols();
        let covariates = DMatrix::from_fn(rows.len(), p, |r, c| self.covariates[(rows[r], c)]);
        Self::new(outcome, arm, covariates, self.covariate_names.clone())
    }

    /// Same patients with a replacement covariate matrix.
    pub fn with_covariates(&self, covariates: DMatrix<f64>, names: Vec<String>) -> Result<Self> {
        Self::new(self.outcome.clone(), self.arm.clone(), covariates, names)
    }

    /// Same patients with a replacement outcome vector (`NaN` = missing).
    pub fn with_outcome(&self, outcome: Vec<f64>) -> Result<Self> {
        Self::new(
            outcome,
            self.arm.clone(),
            self.covariates.clone(),
            self.covariate_names.clone(),
        )
    }

    pub(crate) fn require_complete(&self) -> Result<()> {
        if self.has_missing_outcome() {
            return Err(Error::UnhandledMissing {
                what: "outcomes".into(),
            });
        }
        Ok(())
    }

    /// Writes the dataset as CSV using the schema's column names. Missing
    /// entries are written as the first configured sentinel.
    pub fn write_csv<W: Write>(&self, writer: W, schema: &DataSchema) -> Result<()> {
        let io_err = |e: csv::Error| Error::Io {
            path: "<writer>".into(),
            message: e.to_string(),
        };
        if schema.covariates.len() != self.covariate_names.len() {
            return Err(Error::config(
                "data.covariates",
                "schema does not match dataset columns",
            ));
        }
        let na = schema.na_sentinel.first().map(String::as_str).unwrap_or("NA");
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec![schema.outcome.clone(), schema.arm.clone()];
        header.extend(schema.covariates.iter().cloned());
        w.write_record(&header).map_err(io_err)?;
        let fmt_value = |v: f64| {
            if v.is_nan() {
                na.to_string()
            } else {
                format!("{v:?}")
            }
        };
        for i in 0..self.n() {
            let mut rec = vec![fmt_value(self.outcome[i]), self.arm[i].to_string()];
            for j in 0..self.covariates.ncols() {
                rec.push(fmt_value(self.covariates[(i, j)]));
            }
            w.write_record(&rec).map_err(io_err)?;
        }
        w.flush().map_err(|e| Error::Io {
            path: "<writer>".into(),
            message: e.to_string(),
        })?;
        Ok(())
    }
}

/// Column mapping from a CSV file onto trial roles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSchema {
    pub outcome: String,
    pub arm: String,
    #[serde(default)]
    pub covariates: Vec<String>,
    /// Cell values read as missing. Accepts a string or a list of strings.
    #[serde(default = "default_sentinels", deserialize_with = "one_or_many")]
    pub na_sentinel: Vec<String>,
}

fn default_sentinels() -> Vec<String> {
    vec![String::new(), "NA".to_string()]
}

fn one_or_many<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Vec<String>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum OneOrMany {
        One(String),
        Many(Vec<String>),
    }
    Ok(match OneOrMany::deserialize(d)? {
        OneOrMany::One(s) => vec![s],
        OneOrMany::Many(v) => v,
    })
}

impl DataSchema {
    pub fn new(outcome: &str, arm: &str, covariates: &[&str]) -> Self {
        Self {
            outcome: outcome.into(),
            arm: arm.into(),
            covariates: covariates.iter().map(|c| c.to_string()).collect(),
            na_sentinel: default_sentinels(),
        }
    }

    fn is_missing(&self, cell: &str) -> bool {
        let cell = cell.trim();
        self.na_sentinel.iter().any(|s| s.trim() == cell)
    }
}

/// Reads a CSV file into a validated dataset.
pub fn load_dataset(path: impl AsRef<Path>, schema: &DataSchema) -> Result<TrialDataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    read_dataset(file, schema)
}

/// Reads CSV text (header row required) into a validated dataset.
pub fn read_dataset<R: Read>(reader: R, schema: &DataSchema) -> Result<TrialDataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let io_err = |e: csv::Error| Error::Io {
        path: "<csv>".into(),
        message: e.to_string(),
    };
    let headers = rdr.headers().map_err(io_err)?.clone();
    let locate = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn {
                column: name.to_string(),
            })
    };
    let y_col = locate(&schema.outcome)?;
    let z_col = locate(&schema.arm)?;
    let x_cols = schema
        .covariates
        .iter()
        .map(|c| locate(c))
        .collect::<Result<Vec<_>>>()?;

    let parse = |cell: &str, column: &str, row: usize| -> Result<f64> {
        if schema.is_missing(cell) {
            return Ok(f64::NAN);
        }
        cell.trim()
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| Error::ParseFailure {
                column: column.to_string(),
                row,
                value: cell.to_string(),
            })
    };

    let mut outcome = Vec::new();
    let mut arm = Vec::new();
    let mut x_values: Vec<f64> = Vec::new();
    for (idx, record) in rdr.records().enumerate() {
        let row = idx + 1;
        let record = record.map_err(io_err)?;
        let cell = |col: usize| record.get(col).unwrap_or("");
        outcome.push(parse(cell(y_col), &schema.outcome, row)?);
        let z_cell = cell(z_col);
        let z = match z_cell.trim().parse::<f64>() {
            Ok(0.0) => 0,
            Ok(1.0) => 1,
            _ => {
                return Err(Error::NonBinaryArm {
                    column: schema.arm.clone(),
                    row,
                    value: z_cell.to_string(),
                })
            }
        };
        arm.push(z);
        for (&col, name) in x_cols.iter().zip(&schema.covariates) {
            x_values.push(parse(cell(col), name, row)?);
        }
    }
    let n = outcome.len();
    let covariates = DMatrix::from_row_slice(n, x_cols.len(), &x_values);
    TrialDataset::new(outcome, arm, covariates, schema.covariates.clone())
}

/// Contrast scale for the marginal treatment effect.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    /// `E(Y1) - E(Y0)`
    Difference,
    /// `E(Y1) / E(Y0)`
    Ratio,
    /// `{E(Y1)/(1-E(Y1))} / {E(Y0)/(1-E(Y0))}`
    OddsRatio,
}

impl Scale {
    /// Null value of the contrast.
    pub fn null_value(self) -> f64 {
        match self {
            Scale::Difference => 0.0,
            Scale::Ratio | Scale::OddsRatio => 1.0,
        }
    }

    /// Whether inference is done on the log scale.
    pub fn is_multiplicative(self) -> bool {
        !matches!(self, Scale::Difference)
    }
}

impl fmt::Display for Scale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scale::Difference => "difference",
            Scale::Ratio => "ratio",
            Scale::OddsRatio => "odds_ratio",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeKind {
    Continuous,
    Binary,
    /// Non-negative outcomes (counts, concentrations).
    Positive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EstimandSpec {
    pub scale: Scale,
    pub outcome_kind: OutcomeKind,
}

impl EstimandSpec {
    pub fn new(scale: Scale, outcome_kind: OutcomeKind) -> Self {
        Self { scale, outcome_kind }
    }
}

/// Checks that the scale is legal for the outcome kind.
pub fn check_scale_kind(scale: Scale, kind: OutcomeKind) -> Result<()> {
    let mismatch = |reason: &str| {
        Err(Error::ScaleOutcomeMismatch {
            scale: scale.to_string(),
            reason: reason.into(),
        })
    };
    match scale {
        Scale::OddsRatio if kind != OutcomeKind::Binary => {
            mismatch("odds ratio requires a binary outcome")
        }
        Scale::Ratio if kind == OutcomeKind::Continuous => {
            mismatch("ratio requires a binary or non-negative outcome")
        }
        _ => Ok(()),
    }
}

/// Checks that the scale is legal for the declared outcome kind and that
/// the observed outcomes agree with the declared kind.
pub fn validate_estimand(spec: EstimandSpec, data: &TrialDataset) -> Result<EstimandSpec> {
    let mismatch = |reason: String| Error::ScaleOutcomeMismatch {
        scale: spec.scale.to_string(),
        reason,
    };
    let observed = || data.outcome().iter().copied().filter(|y| !y.is_nan());
    check_scale_kind(spec.scale, spec.outcome_kind)?;
    match spec.outcome_kind {
        OutcomeKind::Binary => {
            if let Some(y) = observed().find(|&y| y != 0.0 && y != 1.0) {
                return Err(mismatch(format!("outcome value {y} is not 0 or 1")));
            }
        }
        OutcomeKind::Positive => {
            if let Some(y) = observed().find(|&y| y < 0.0) {
                return Err(mismatch(format!("outcome value {y} is negative")));
            }
        }
        OutcomeKind::Continuous => {}
    }
    Ok(spec)
}

/// One term of a working-model formula.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Term {
    /// `x`
    Linear(String),
    /// `x^2` or `x^3`
    Power(String, u8),
    /// `x:w`
    Product(String, String),
}

impl Term {
    pub fn linear(name: &str) -> Self {
        Term::Linear(name.to_string())
    }

    pub fn columns(&self) -> Vec<&str> {
        match self {
            Term::Linear(c) | Term::Power(c, _) => vec![c],
            Term::Product(a, b) => vec![a, b],
        }
    }

    fn evaluate(&self, row: &[f64], idx: &[usize]) -> f64 {
        match self {
            Term::Linear(_) => row[idx[0]],
            Term::Power(_, d) => row[idx[0]].powi(i32::from(*d)),
            Term::Product(..) => row[idx[0]] * row[idx[1]],
        }
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Term::Linear(c) => write!(f, "{c}"),
            Term::Power(c, d) => write!(f, "{c}^{d}"),
            Term::Product(a, b) => write!(f, "{a}:{b}"),
        }
    }
}

impl FromStr for Term {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = |msg: &str| Error::InvalidFormula(format!("term `{s}`: {msg}"));
        if let Some((a, b)) = s.split_once(':') {
            let (a, b) = (a.trim(), b.trim());
            if a.is_empty() || b.is_empty() || b.contains(':') {
                return Err(bad("products take exactly two columns"));
            }
            return Ok(Term::Product(a.into(), b.into()));
        }
        if let Some((c, d)) = s.split_once('^') {
            let c = c.trim();
            let degree: u8 = d.trim().parse().map_err(|_| bad("bad exponent"))?;
            if c.is_empty() {
                return Err(bad("missing column"));
            }
            return match degree {
                1 => Ok(Term::Linear(c.into())),
                2 | 3 => Ok(Term::Power(c.into(), degree)),
                _ => Err(bad("polynomial degree must be 1, 2 or 3")),
            };
        }
        if s.is_empty() {
            return Err(bad("empty term"));
        }
        Ok(Term::Linear(s.into()))
    }
}

impl TryFrom<String> for Term {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Term> for String {
    fn from(t: Term) -> String {
        t.to_string()
    }
}

/// Ordered covariate terms of a working model, plus an intercept flag.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelFormula {
    pub terms: Vec<Term>,
    #[serde(default = "yes")]
    pub include_intercept: bool,
}

fn yes() -> bool {
    true
}

impl Default for ModelFormula {
    fn default() -> Self {
        Self::intercept_only()
    }
}

impl ModelFormula {
    pub fn new(terms: Vec<Term>, include_intercept: bool) -> Self {
        Self {
            terms,
            include_intercept,
        }
    }

    pub fn intercept_only() -> Self {
        Self::new(Vec::new(), true)
    }

    /// Intercept plus one linear term per named column.
    pub fn main_effects<S: AsRef<str>>(columns: &[S]) -> Self {
        Self::new(
            columns.iter().map(|c| Term::linear(c.as_ref())).collect(),
            true,
        )
    }

    /// Parses terms such as `["age", "age^2", "age:sex"]`.
    pub fn parse<S: AsRef<str>>(terms: &[S]) -> Result<Self> {
        let terms = terms
            .iter()
            .map(|t| t.as_ref().parse())
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::new(terms, true))
    }

    /// Number of fitted parameters excluding the intercept.
    pub fn n_terms(&self) -> usize {
        self.terms.len()
    }

    pub fn n_columns(&self) -> usize {
        self.terms.len() + usize::from(self.include_intercept)
    }

    pub fn columns_used(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for c in self.terms.iter().flat_map(Term::columns) {
            if !out.contains(&c) {
                out.push(c);
            }
        }
        out
    }

    /// Checks term references and duplicates against the dataset columns.
    pub fn validate(&self, names: &[String]) -> Result<()> {
        let mut seen = HashSet::new();
        for term in &self.terms {
            for c in term.columns() {
                if !names.iter().any(|n| n == c) {
                    return Err(Error::InvalidFormula(format!(
                        "term `{term}` references unknown column `{c}`"
                    )));
                }
            }
            if !seen.insert(term.to_string()) {
                return Err(Error::InvalidFormula(format!("duplicate term `{term}`")));
            }
        }
        Ok(())
    }

    pub(crate) fn require_intercept(&self) -> Result<()> {
        if self.include_intercept {
            Ok(())
        } else {
            Err(Error::InvalidFormula(
                "standardization requires an intercept in the working model".into(),
            ))
        }
    }

    /// Design matrix for every patient.
    pub fn design(&self, data: &TrialDataset) -> Result<DMatrix<f64>> {
        let rows: Vec<usize> = (0..data.n()).collect();
        self.design_rows(data, &rows)
    }

    /// Design matrix restricted to `rows`. Fails if a used covariate is
    /// missing on any of these rows.
    pub fn design_rows(&self, data: &TrialDataset, rows: &[usize]) -> Result<DMatrix<f64>> {
        self.validate(data.covariate_names())?;
        let indices: Vec<Vec<usize>> = self
            .terms
            .iter()
            .map(|t| {
                t.columns()
                    .into_iter()
                    .map(|c| data.column_index(c).expect("validated"))
                    .collect()
            })
            .collect();
        let used: Vec<usize> = self
            .columns_used()
            .into_iter()
            .map(|c| data.column_index(c).expect("validated"))
            .collect();
        let x = data.covariates();
        let offset = usize::from(self.include_intercept);
        let mut design = DMatrix::zeros(rows.len(), self.n_columns());
        let mut row_buf = vec![0.0; x.ncols()];
        for (r, &i) in rows.iter().enumerate() {
            for &j in &used {
                if data.covariate_missing()[(i, j)] {
                    return Err(Error::UnhandledMissing {
                        what: format!("covariate values in `{}`", data.covariate_names()[j]),
                    });
                }
                row_buf[j] = x[(i, j)];
            }
            if self.include_intercept {
                design[(r, 0)] = 1.0;
            }
            for (k, (term, idx)) in self.terms.iter().zip(&indices).enumerate() {
                design[(r, k + offset)] = term.evaluate(&row_buf, idx);
            }
        }
        Ok(design)
    }
}

impl fmt::Display for ModelFormula {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts: Vec<String> = Vec::new();
        if self.include_intercept {
            parts.push("1".into());
        }
        parts.extend(self.terms.iter().map(Term::to_string));
        if parts.is_empty() {
            parts.push("0".into());
        }
        write!(f, "{}", parts.join(" + "))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schema() -> DataSchema {
        DataSchema::new("y", "z", &["x"])
    }

    #[test]
    fn parses_small_csv() {
        let csv = "y,z\n1,1\n0,1\n1,0\n0,0\n";
        let data = read_dataset(csv.as_bytes(), &DataSchema::new("y", "z", &[])).unwrap();
        assert_eq!(data.n(), 4);
        assert_eq!(data.n_treated(), 2);
        assert_eq!(data.n_control(), 2);
        assert_eq!(data.outcome(), &[1.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn rejects_arm_value_two() {
        let csv = "y,z,x\n1,1,0\n0,2,1\n1,0,2\n";
        let err = read_dataset(csv.as_bytes(), &schema()).unwrap_err();
        match err {
            Error::NonBinaryArm { row, value, .. } => {
                assert_eq!(row, 2);
                assert_eq!(value, "2");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn sentinel_becomes_mask_entry() {
        let csv = "y,z,x\n1,1,0.5\n0,1,NA\n1,0,2\n0,0,3\n";
        let data = read_dataset(csv.as_bytes(), &schema()).unwrap();
        let mask = data.covariate_missing();
        assert_eq!(mask.iter().filter(|&&m| m).count(), 1);
        assert!(mask[(1, 0)]);
    }

    #[test]
    fn missing_column_is_named() {
        let csv = "y,z\n1,1\n0,0\n";
        let err = read_dataset(csv.as_bytes(), &schema()).unwrap_err();
        assert!(matches!(err, Error::MissingColumn { ref column } if column == "x"));
    }

    #[test]
    fn unparsable_value_reports_row() {
        let csv = "y,z,x\n1,1,0\n0,1,abc\n1,0,2\n0,0,3\n";
        let err = read_dataset(csv.as_bytes(), &schema()).unwrap_err();
        assert!(matches!(err, Error::ParseFailure { row: 2, ref column, .. } if column == "x"));
    }

    #[test]
    fn empty_arm_rejected() {
        let err = TrialDataset::without_covariates(vec![1.0, 2.0], vec![1, 1]).unwrap_err();
        assert!(matches!(err, Error::EmptyArm { arm: Arm::Control }));
    }

    #[test]
    fn estimand_validation() {
        let binary = TrialDataset::without_covariates(vec![1.0, 0.0, 1.0, 0.0], vec![1, 1, 0, 0])
            .unwrap();
        let or = EstimandSpec::new(Scale::OddsRatio, OutcomeKind::Binary);
        assert!(validate_estimand(or, &binary).is_ok());

        let cont = TrialDataset::without_covariates(vec![1.0, 2.5, 1.0, 0.0], vec![1, 1, 0, 0])
            .unwrap();
        let err = validate_estimand(or, &cont).unwrap_err();
        assert!(matches!(err, Error::ScaleOutcomeMismatch { .. }));
        let or_cont = EstimandSpec::new(Scale::OddsRatio, OutcomeKind::Continuous);
        assert!(validate_estimand(or_cont, &cont).is_err());

        let neg = TrialDataset::without_covariates(vec![1.0, -1.0, 1.0, 0.5], vec![1, 1, 0, 0])
            .unwrap();
        let ratio = EstimandSpec::new(Scale::Ratio, OutcomeKind::Positive);
        assert!(matches!(
            validate_estimand(ratio, &neg),
            Err(Error::ScaleOutcomeMismatch { .. })
        ));
    }

    #[test]
    fn term_parsing() {
        assert_eq!("age".parse::<Term>().unwrap(), Term::linear("age"));
        assert_eq!(
            "age^2".parse::<Term>().unwrap(),
            Term::Power("age".into(), 2)
        );
        assert_eq!(
            "age : sex".parse::<Term>().unwrap(),
            Term::Product("age".into(), "sex".into())
        );
        assert!("age^4".parse::<Term>().is_err());
        assert!("a:b:c".parse::<Term>().is_err());
    }

    #[test]
    fn design_matrix_layout() {
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let data = TrialDataset::new(
            vec![0.0, 1.0, 0.0],
            vec![1, 0, 1],
            x,
            vec!["a".into(), "b".into()],
        )
        .unwrap();
        let f = ModelFormula::parse(&["a", "b^2", "a:b"]).unwrap();
        let d = f.design(&data).unwrap();
        assert_eq!(d.ncols(), 4);
        assert_eq!(d.row(1).iter().copied().collect::<Vec<_>>(), vec![1.0, 3.0, 16.0, 12.0]);
        assert!(ModelFormula::parse(&["c"]).unwrap().design(&data).is_err());
    }

    #[test]
    fn csv_round_trip_with_missing() {
        let csv = "y,z,x\n1.25,1,0.1\nNA,1,NA\n-3,0,2e-7\n0,0,3\n";
        let data = read_dataset(csv.as_bytes(), &schema()).unwrap();
        let mut buf = Vec::new();
        data.write_csv(&mut buf, &schema()).unwrap();
        let back = read_dataset(buf.as_slice(), &schema()).unwrap();
        assert_eq!(back.arm(), data.arm());
        assert_eq!(back.outcome_missing(), data.outcome_missing());
        assert_eq!(back.covariate_missing(), data.covariate_missing());
        for (a, b) in back.outcome().iter().zip(data.outcome()) {
            assert!(a == b || (a.is_nan() && b.is_nan()));
        }
    }
}
