//! Dataset manifests: which files to read and how to interpret each column.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    Continuous,
    /// Any positive raw value within a slot reads as 1 (covers both native
    /// 0/1 indicators and count features like steps).
    Binary,
    Categorical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub name: String,
    pub kind: FeatureKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cardinality: Option<usize>,
    /// Apply ln(1 + x) to observed values at ingestion (continuous only).
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub log1p: bool,
}

impl FeatureSpec {
    pub fn continuous(name: impl Into<String>) -> Self {
        FeatureSpec {
            name: name.into(),
            kind: FeatureKind::Continuous,
            cardinality: None,
            log1p: false,
        }
    }

    pub fn binary(name: impl Into<String>) -> Self {
        FeatureSpec {
            name: name.into(),
            kind: FeatureKind::Binary,
            cardinality: None,
            log1p: false,
        }
    }

    pub fn effective_cardinality(&self) -> usize {
        match self.kind {
            FeatureKind::Continuous => 0,
            FeatureKind::Binary => 2,
            FeatureKind::Categorical => self.cardinality.unwrap_or(2),
        }
    }
}

fn default_slot_minutes() -> u32 {
    10
}

/// Dataset description: sequence files, optional label files, the feature
/// schema shared by all of them, and the slot length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub sequences: Vec<PathBuf>,
    pub features: Vec<FeatureSpec>,
    #[serde(default = "default_slot_minutes")]
    pub slot_minutes: u32,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub labels: Vec<PathBuf>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        if self.slot_minutes == 0 {
            return Err(Error::InvalidArgument("slot length must be positive".into()));
        }
        if self.features.is_empty() {
            return Err(Error::InvalidArgument("manifest declares no features".into()));
        }
        let mut names = std::collections::BTreeSet::new();
        for f in &self.features {
            if f.name.is_empty() || f.name == "timestamp" {
                return Err(Error::InvalidArgument(format!(
                    "invalid feature name `{}`",
                    f.name
                )));
            }
            if !names.insert(&f.name) {
                return Err(Error::InvalidArgument(format!(
                    "duplicate feature name `{}`",
                    f.name
                )));
            }
            match f.kind {
                FeatureKind::Continuous => {}
                FeatureKind::Binary => {
                    if let Some(c) = f.cardinality {
                        if c != 2 {
                            return Err(Error::InvalidArgument(format!(
                                "binary feature `{}` cannot have cardinality {c}",
                                f.name
                            )));
                        }
                    }
                    if f.log1p {
                        return Err(Error::InvalidArgument(format!(
                            "log1p does not apply to binary feature `{}`",
                            f.name
                        )));
                    }
                }
                FeatureKind::Categorical => {
                    let c = f.cardinality.ok_or_else(|| {
                        Error::InvalidArgument(format!(
                            "categorical feature `{}` needs a cardinality",
                            f.name
                        ))
                    })?;
                    if c < 2 {
                        return Err(Error::InvalidArgument(format!(
                            "categorical feature `{}` needs at least 2 categories",
                            f.name
                        )));
                    }
                    if f.log1p {
                        return Err(Error::InvalidArgument(format!(
                            "log1p does not apply to categorical feature `{}`",
                            f.name
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::Json {
            path: path.display().to_string(),
            source: e,
        })?;
        manifest.validate()?;
        // Data paths are relative to the manifest's own directory.
        if let Some(dir) = path.parent() {
            for p in manifest.sequences.iter_mut().chain(manifest.labels.iter_mut()) {
                if p.is_relative() {
                    *p = dir.join(&p);
                }
            }
        }
        Ok(manifest)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn continuous_specs(&self) -> Vec<&FeatureSpec> {
        self.features
            .iter()
            .filter(|f| f.kind == FeatureKind::Continuous)
            .collect()
    }

    pub fn discrete_specs(&self) -> Vec<&FeatureSpec> {
        self.features
            .iter()
            .filter(|f| f.kind != FeatureKind::Continuous)
            .collect()
    }

    /// Names ordered as stored in sequences: continuous block, then discrete.
    pub fn ordered_feature_names(&self) -> Vec<String> {
        self.continuous_specs()
            .iter()
            .map(|f| f.name.clone())
            .chain(self.discrete_specs().iter().map(|f| f.name.clone()))
            .collect()
    }

    pub fn cardinalities(&self) -> Vec<usize> {
        self.discrete_specs()
            .iter()
            .map(|f| f.effective_cardinality())
            .collect()
    }
}
