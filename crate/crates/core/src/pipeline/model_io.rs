//! Model files: a versioned JSON document carrying the parameters, the
//! feature schema they were trained on, and the sleep-state designation.

use std::collections::BTreeSet;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ClampEntry, Constraints, GaussianParams, ModelParameters};
use crate::pipeline::manifest::{FeatureKind, FeatureSpec};

pub const MODEL_FILE_VERSION: u32 = 1;

/// A model plus the schema context it needs to be applied to new data.
#[derive(Debug, Clone, PartialEq)]
pub struct SavedModel {
    pub params: ModelParameters,
    pub features: Vec<FeatureSpec>,
    pub sleep_states: BTreeSet<usize>,
}

impl SavedModel {
    /// The constraints equivalent to this model's clamp and sleep states.
    pub fn constraints(&self) -> Constraints {
        Constraints {
            fixed_entries: self.params.clamp.clone(),
            sleep_states: self.sleep_states.clone(),
        }
    }

    fn check_schema(&self) -> Result<()> {
        let g = self
            .features
            .iter()
            .filter(|f| f.kind == FeatureKind::Continuous)
            .count();
        let discrete: Vec<usize> = self
            .features
            .iter()
            .filter(|f| f.kind != FeatureKind::Continuous)
            .map(|f| f.effective_cardinality())
            .collect();
        if g != self.params.num_continuous() {
            return Err(Error::Shape(format!(
                "schema has {g} continuous features, parameters have {}",
                self.params.num_continuous()
            )));
        }
        if discrete != self.params.cardinalities() {
            return Err(Error::Shape(format!(
                "schema cardinalities {discrete:?} do not match parameters {:?}",
                self.params.cardinalities()
            )));
        }
        for &s in &self.sleep_states {
            if s >= self.params.num_states() {
                return Err(Error::Shape(format!(
                    "sleep state {s} out of range ({} states)",
                    self.params.num_states()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct GaussianFile {
    mean: Vec<f64>,
    cov: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    version: u32,
    num_states: usize,
    pi: Vec<f64>,
    trans: Vec<Vec<f64>>,
    gaussians: Vec<GaussianFile>,
    discretes: Vec<Vec<Vec<f64>>>,
    #[serde(default)]
    clamp: Vec<ClampEntry>,
    features: Vec<FeatureSpec>,
    #[serde(default)]
    sleep_states: Vec<usize>,
}

impl From<&SavedModel> for ModelFile {
    fn from(m: &SavedModel) -> Self {
        let p = &m.params;
        ModelFile {
            version: MODEL_FILE_VERSION,
            num_states: p.num_states(),
            pi: p.pi.to_vec(),
            trans: p.trans.rows().into_iter().map(|r| r.to_vec()).collect(),
            gaussians: p
                .gaussians
                .iter()
                .map(|g| GaussianFile {
                    mean: g.mean.to_vec(),
                    cov: g.cov.rows().into_iter().map(|r| r.to_vec()).collect(),
                })
                .collect(),
            discretes: p
                .discretes
                .iter()
                .map(|tables| tables.iter().map(|t| t.to_vec()).collect())
                .collect(),
            clamp: p.clamp.clone(),
            features: m.features.clone(),
            sleep_states: m.sleep_states.iter().copied().collect(),
        }
    }
}

fn matrix_from_rows(rows: &[Vec<f64>], what: &str) -> Result<Array2<f64>> {
    let nrows = rows.len();
    let ncols = rows.first().map(|r| r.len()).unwrap_or(0);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Shape(format!("{what} rows have uneven lengths")));
    }
    Ok(Array2::from_shape_fn((nrows, ncols), |(r, c)| rows[r][c]))
}

impl ModelFile {
    fn into_saved(self) -> Result<SavedModel> {
        if self.version != MODEL_FILE_VERSION {
            return Err(Error::ModelVersion {
                found: self.version,
                expected: MODEL_FILE_VERSION,
            });
        }
        if self.num_states != self.pi.len() {
            return Err(Error::Shape(format!(
                "num_states is {} but pi has length {}",
                self.num_states,
                self.pi.len()
            )));
        }
        let params = ModelParameters::new(
            Array1::from_vec(self.pi),
            matrix_from_rows(&self.trans, "transition matrix")?,
            self.gaussians
                .into_iter()
                .map(|g| {
                    Ok(GaussianParams {
                        mean: Array1::from_vec(g.mean),
                        cov: matrix_from_rows(&g.cov, "covariance")?,
                    })
                })
                .collect::<Result<_>>()?,
            self.discretes
                .into_iter()
                .map(|tables| tables.into_iter().map(Array1::from_vec).collect())
                .collect(),
            self.clamp,
        )?
        .validated()?;
        let saved = SavedModel {
            params,
            features: self.features,
            sleep_states: self.sleep_states.into_iter().collect(),
        };
        saved.check_schema()?;
        Ok(saved)
    }
}

pub fn save_model(path: &Path, model: &SavedModel) -> Result<()> {
    model.check_schema()?;
    let file = ModelFile::from(model);
    let text = serde_json::to_string_pretty(&file).expect("model serializes");
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path.display().to_string(), e))
}

/// Load and fully validate a model file.
pub fn load_model(path: &Path) -> Result<SavedModel> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let file: ModelFile = serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.display().to_string(),
        source: e,
    })?;
    file.into_saved()
}
