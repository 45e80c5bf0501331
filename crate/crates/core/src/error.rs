//! Error type shared by every stage of the pipeline.

use std::fmt;

use serde::Serialize;

/// Treatment arm label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, PartialOrd, Ord)]
#[serde(rename_all = "lowercase")]
pub enum Arm {
    Treated,
    Control,
}

impl Arm {
    pub fn indicator(self) -> u8 {
        match self {
            Arm::Treated => 1,
            Arm::Control => 0,
        }
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Arm::Treated => f.write_str("treated"),
            Arm::Control => f.write_str("control"),
        }
    }
}

/// Coarse error classes, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ErrorCategory {
    Config,
    Data,
    Estimation,
    Inference,
}

impl ErrorCategory {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorCategory::Config => 1,
            ErrorCategory::Data => 2,
            ErrorCategory::Estimation => 3,
            ErrorCategory::Inference => 4,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    // data model
    #[error("I/O error on {path}: {message}")]
    Io { path: String, message: String },
    #[error("column `{column}` not found in data header")]
    MissingColumn { column: String },
    #[error("arm column `{column}` has value `{value}` at row {row}; only 0 and 1 are accepted")]
    NonBinaryArm { column: String, row: usize, value: String },
    #[error("the {arm} arm has no patients")]
    EmptyArm { arm: Arm },
    #[error("could not parse `{value}` in column `{column}` at row {row}")]
    ParseFailure { column: String, row: usize, value: String },
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),
    #[error("scale `{scale}` is not valid for this outcome: {reason}")]
    ScaleOutcomeMismatch { scale: String, reason: String },
    #[error("invalid model formula: {0}")]
    InvalidFormula(String),
    #[error("invalid configuration: {field}: {message}")]
    InvalidConfig { field: String, message: String },

    // glm engine
    #[error("design matrix is rank deficient ({rank} of {columns} columns independent)")]
    RankDeficientDesign { rank: usize, columns: usize },
    #[error("logistic fit shows separation: fitted probabilities reached 0 or 1")]
    Separation,
    #[error("IRLS did not converge after {iterations} iterations")]
    NonConvergence { iterations: usize },
    #[error("dimension mismatch: expected {expected}, got {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("{arm} arm working model: {source}")]
    ArmFit {
        arm: Arm,
        #[source]
        source: Box<Error>,
    },
    #[error("treatment model: {source}")]
    TreatmentModel {
        #[source]
        source: Box<Error>,
    },

    // estimators
    #[error("empirical randomization probability is {pi_hat}; both arms must be non-empty")]
    DegenerateRandomization { pi_hat: f64 },
    #[error("estimate at the boundary ({detail}); contrast undefined on this scale")]
    BoundaryEstimate { detail: String },
    #[error("data contain missing {what}; configure an imputation plan")]
    UnhandledMissing { what: String },

    // inference
    #[error("too few patients: {0}")]
    TooFewPatients(String),
    #[error("{failed} of {total} bootstrap replicates failed (limit 5%)")]
    ExcessiveFailures { failed: usize, total: usize },
    #[error("standard error is zero; Wald statistic undefined")]
    ZeroStandardError,

    // missing data
    #[error("covariate `{column}` has no observed values")]
    AllMissingColumn { column: String },
    #[error("{arm} arm has {complete} complete cases; at least {required} are needed")]
    InsufficientCompleteCases { arm: Arm, complete: usize, required: usize },
    #[error("{arm} arm: {clamped} of {total} completeness probabilities fall below the 0.01 floor")]
    PositivityViolation { arm: Arm, clamped: usize, total: usize },

    // simulation
    #[error("true estimands are not enumerable for this DGP: {0}")]
    NotEnumerable(String),
    #[error("estimator `{name}` failed on {failed} of {total} replicates (limit 2%)")]
    ExcessiveReplicateFailures { name: String, failed: usize, total: usize },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn category(&self) -> ErrorCategory {
        use Error::*;
        match self {
            InvalidConfig { .. } | InvalidFormula(_) | ScaleOutcomeMismatch { .. } => {
                ErrorCategory::Config
            }
            Io { .. }
            | MissingColumn { .. }
            | NonBinaryArm { .. }
            | EmptyArm { .. }
            | ParseFailure { .. }
            | InvalidDataset(_)
            | UnhandledMissing { .. }
            | AllMissingColumn { .. } => ErrorCategory::Data,
            TooFewPatients(_) | ExcessiveFailures { .. } | ZeroStandardError => {
                ErrorCategory::Inference
            }
            _ => ErrorCategory::Estimation,
        }
    }

    /// Short machine-readable name of the variant.
    pub fn kind(&self) -> &'static str {
        use Error::*;
        match self {
            Io { .. } => "Io",
            MissingColumn { .. } => "MissingColumn",
            NonBinaryArm { .. } => "NonBinaryArm",
            EmptyArm { .. } => "EmptyArm",
            ParseFailure { .. } => "ParseFailure",
            InvalidDataset(_) => "InvalidDataset",
            ScaleOutcomeMismatch { .. } => "ScaleOutcomeMismatch",
            InvalidFormula(_) => "InvalidFormula",
            InvalidConfig { .. } => "InvalidConfig",
            RankDeficientDesign { .. } => "RankDeficientDesign",
            Separation => "Separation",
            NonConvergence { .. } => "NonConvergence",
            DimensionMismatch { .. } => "DimensionMismatch",
            ArmFit { source, .. } | TreatmentModel { source } => source.kind(),
            DegenerateRandomization { .. } => "DegenerateRandomization",
            BoundaryEstimate { .. } => "BoundaryEstimate",
            UnhandledMissing { .. } => "UnhandledMissing",
            TooFewPatients(_) => "TooFewPatients",
            ExcessiveFailures { .. } => "ExcessiveFailures",
            ZeroStandardError => "ZeroStandardError",
            AllMissingColumn { .. } => "AllMissingColumn",
            InsufficientCompleteCases { .. } => "InsufficientCompleteCases",
            PositivityViolation { .. } => "PositivityViolation",
            NotEnumerable(_) => "NotEnumerable",
            ExcessiveReplicateFailures { .. } => "ExcessiveReplicateFailures",
        }
    }

    /// Library module the error originates from.
    pub fn module(&self) -> &'static str {
        use Error::*;
        match self.root() {
            InvalidConfig { .. } => "config",
            Io { .. }
            | MissingColumn { .. }
            | NonBinaryArm { .. }
            | EmptyArm { .. }
            | ParseFailure { .. }
            | InvalidDataset(_)
            | ScaleOutcomeMismatch { .. }
            | InvalidFormula(_) => "data",
            RankDeficientDesign { .. } | Separation | NonConvergence { .. } | DimensionMismatch { .. } => {
                "glm"
            }
            TooFewPatients(_) | ExcessiveFailures { .. } | ZeroStandardError => "inference",
            AllMissingColumn { .. } | InsufficientCompleteCases { .. } | PositivityViolation { .. } => {
                "missing"
            }
            NotEnumerable(_) | ExcessiveReplicateFailures { .. } => "simulation",
            _ => "estimators",
        }
    }

    /// The innermost error, looking through arm/treatment-model tags.
    pub fn root(&self) -> &Error {
        match self {
            Error::ArmFit { source, .. } | Error::TreatmentModel { source } => source.root(),
            other => other,
        }
    }

    /// Suggested remedy shown next to the error in CLI output.
    pub fn hint(&self) -> &'static str {
        match self.root() {
            Error::Separation | Error::NonConvergence { .. } => {
                "the working model could not be fitted; simplify the formula or fall back to the unadjusted estimator"
            }
            Error::RankDeficientDesign { .. } => {
                "remove collinear or constant covariate terms from the formula"
            }
            Error::ScaleOutcomeMismatch { .. } => {
                "odds ratios need a binary outcome; ratios need non-negative outcomes"
            }
            Error::UnhandledMissing { .. } => {
                "add an `imputation` section to the config"
            }
            Error::MissingColumn { .. } | Error::ParseFailure { .. } | Error::NonBinaryArm { .. } => {
                "check the column mapping in the `data` section of the config"
            }
            Error::PositivityViolation { .. } => {
                "the missingness model predicts near-zero completeness; simplify it or use mar_standardization"
            }
            Error::ExcessiveFailures { .. } | Error::TooFewPatients(_) => {
                "the sample is too small for resampling-based inference; use the influence method"
            }
            _ => "",
        }
    }

    pub(crate) fn in_arm(self, arm: Arm) -> Error {
        Error::ArmFit {
            arm,
            source: Box::new(self),
        }
    }

    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Error {
        Error::InvalidConfig {
            field: field.into(),
            message: message.into(),
        }
    }
}
