//! Config-file plumbing shared by analyses and simulations.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::data::{ModelFormula, Term};
use crate::error::{Error, Result};
use crate::estimators::{EstimatorConfig, Method};
use crate::glm::LinkFunction;

/// One estimator entry of a config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorSpec {
    /// Label used in reports; defaults to the method name.
    #[serde(default)]
    pub name: Option<String>,
    pub method: Method,
    #[serde(default)]
    pub terms: Vec<Term>,
    #[serde(default)]
    pub link: Option<LinkFunction>,
    #[serde(default)]
    pub primary: bool,
}

impl EstimatorSpec {
    pub fn new(method: Method, terms: &[&str], link: LinkFunction) -> Result<Self> {
        let terms = ModelFormula::parse(terms)?.terms;
        Ok(Self {
            name: None,
            method,
            terms,
            link: Some(link),
            primary: false,
        })
    }

    pub fn named(mut self, name: &str) -> Self {
        self.name = Some(name.to_string());
        self
    }

    pub fn label(&self) -> String {
        self.name.clone().unwrap_or_else(|| self.method.name().to_string())
    }

    pub fn to_config(&self) -> Result<EstimatorConfig> {
        let link = self.link.unwrap_or(LinkFunction::Identity);
        if matches!(self.method, Method::Ancova | Method::Anhecova) && link != LinkFunction::Identity {
            return Err(Error::config(
                format!("estimators.{}.link", self.label()),
                format!("{} requires the identity link", self.method),
            ));
        }
        let formula = ModelFormula::new(self.terms.clone(), true);
        EstimatorConfig::new(self.method, formula, link)
    }
}

/// Checks labels are unique and at most one entry is primary.
pub fn check_estimators(specs: &[EstimatorSpec]) -> Result<()> {
    if specs.is_empty() {
        return Err(Error::config("estimators", "at least one estimator is required"));
    }
    let primaries = specs.iter().filter(|s| s.primary).count();
    if primaries > 1 {
        return Err(Error::config(
            "estimators",
            format!("{primaries} estimators are flagged primary; at most one is allowed"),
        ));
    }
    let mut seen = std::collections::HashSet::new();
    for s in specs {
        if !seen.insert(s.label()) {
            return Err(Error::config(
                "estimators",
                format!("duplicate estimator name `{}`", s.label()),
            ));
        }
        s.to_config()?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConfigFormat {
    Json,
    Toml,
}

impl ConfigFormat {
    /// `.toml` files are TOML, everything else JSON.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("toml") => Self::Toml,
            _ => Self::Json,
        }
    }
}

pub fn parse_config<T: DeserializeOwned>(text: &str, format: ConfigFormat) -> Result<T> {
    match format {
        ConfigFormat::Json => serde_json::from_str(text).map_err(|e| Error::InvalidConfig {
            field: "config".into(),
            message: e.to_string(),
        }),
        ConfigFormat::Toml => toml::from_str(text).map_err(|e| Error::InvalidConfig {
            field: "config".into(),
            message: e.message().to_string(),
        }),
    }
}

pub fn load_config<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::InvalidConfig {
        field: "config".into(),
        message: format!("{}: {e}", path.display()),
    })?;
    parse_config(&text, ConfigFormat::from_path(path))
}
