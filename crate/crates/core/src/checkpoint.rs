//! JSON checkpoints holding every tensor of a model by name.
//!
//! Scalars are written in shortest round-trip form and parsed with exact
//! rounding, so save → load reproduces every bit.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::Model;
use crate::config::RunConfig;
use crate::data::LabelManifest;
use crate::error::{Error, Result};
use crate::tensors::ParamSet;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub shape: Vec<usize>,
    pub trainable: bool,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: RunConfig,
    pub labels: Option<LabelManifest>,
    pub seed: u64,
    pub tensors: BTreeMap<String, TensorRecord>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, config: &RunConfig, labels: Option<LabelManifest>) -> Result<Self> {
        if model.config() != &config.model_config() {
            return Err(Error::Consistency("model shapes differ from the run configuration".into()));
        }
        let mut tensors = BTreeMap::new();
        let mut record = |trainable: bool, name: &str, shape: &[usize], data: &[f64]| {
            tensors.insert(
                name.to_string(),
                TensorRecord {
                    shape: shape.to_vec(),
                    trainable,
                    values: data.to_vec(),
                },
            );
        };
        model.backbone.visit("backbone", &mut |n, s, d| record(false, n, s, d));
        model.trainable.visit("", &mut |n, s, d| record(true, n, s, d));
        if let Some((name, _)) = tensors.iter().find(|(_, t)| t.values.iter().any(|v| !v.is_finite())) {
            return Err(Error::Numerical {
                step: 0,
                message: format!("tensor {name} holds a non-finite value"),
            });
        }
        Ok(Checkpoint {
            format_version: FORMAT_VERSION,
            config: config.clone(),
            labels,
            seed: config.seed,
            tensors,
        })
    }

    /// Rebuilds the model, checking every tensor is present with the shape
    /// the configuration implies and nothing extra is stored.
    pub fn to_model(&self) -> Result<Model> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::Config(format!(
                "checkpoint format {} is not supported (expected {FORMAT_VERSION})",
                self.format_version
            )));
        }
        self.config.validate()?;
        let mut model = Model::zeros(self.config.model_config())?;
        let mut seen = 0;
        let mut problem = None;
        let mut load = |name: &str, shape: &[usize], data: &mut [f64], trainable: bool| match self.tensors.get(name) {
            Some(t) if t.shape == shape && t.values.len() == data.len() && t.trainable == trainable => {
                data.copy_from_slice(&t.values);
                seen += 1;
            }
            Some(t) => {
                problem.get_or_insert(format!("tensor {name}: stored shape {:?}, expected {shape:?}", t.shape));
            }
            None => {
                problem.get_or_insert(format!("tensor {name} missing"));
            }
        };
        model.backbone.visit_mut("backbone", &mut |n, s, d| load(n, s, d, false));
        model.trainable.visit_mut("", &mut |n, s, d| load(n, s, d, true));
        if let Some(p) = problem {
            return Err(Error::Consistency(p));
        }
        if seen != self.tensors.len() {
            return Err(Error::Consistency(format!(
                "checkpoint holds {} tensors, the configuration uses {seen}",
                self.tensors.len()
            )));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        serde_json::to_writer(&mut w, self)?;
        std::io::Write::flush(&mut w).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Data {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })
    }
}
