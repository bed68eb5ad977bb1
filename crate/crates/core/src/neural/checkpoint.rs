//! Self-describing JSON checkpoints: configuration, vocabulary, and every
//! parameter tensor as `{name, shape, values}` with row-major f64 values.
//! Floats are written in shortest round-trip form, so save/load is bitwise exact.

use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::model::{CoherenceModel, ModelConfig, ModelParams};
use super::ops::BatchNorm;
use super::vocab::Vocab;
use crate::error::{CoherenceError, Result};

pub const CHECKPOINT_FORMAT: &str = "entity-coherence-checkpoint/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub tensors: Vec<NamedTensor>,
    /// Free-form metadata (training configuration, epoch, dev accuracy).
    #[serde(default)]
    pub metadata: serde_json::Value,
}

fn tensor(name: &str, shape: &[usize], values: impl IntoIterator<Item = f64>) -> NamedTensor {
    NamedTensor {
        name: name.to_string(),
        shape: shape.to_vec(),
        values: values.into_iter().collect(),
    }
}

impl Checkpoint {
    pub fn from_model(model: &CoherenceModel, metadata: serde_json::Value) -> Checkpoint {
        let p = &model.params;
        let bn = &p.batchnorm;
        let (v, d) = p.embeddings.dim();
        let tensors = vec![
            tensor("embeddings", &[v, d], p.embeddings.iter().copied()),
            tensor(
                "filters",
                &[p.filters.nrows(), p.filters.ncols()],
                p.filters.iter().copied(),
            ),
            tensor("filter_bias", &[p.filter_bias.len()], p.filter_bias.iter().copied()),
            tensor("bn_gamma", &[bn.gamma.len()], bn.gamma.iter().copied()),
            tensor("bn_beta", &[bn.beta.len()], bn.beta.iter().copied()),
            tensor(
                "bn_running_mean",
                &[bn.running_mean.len()],
                bn.running_mean.iter().copied(),
            ),
            tensor(
                "bn_running_var",
                &[bn.running_var.len()],
                bn.running_var.iter().copied(),
            ),
            tensor(
                "score_weights",
                &[p.score_weights.len()],
                p.score_weights.iter().copied(),
            ),
            tensor("score_bias", &[1], [p.score_bias]),
        ];
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            config: model.config.clone(),
            vocab: model.vocab.clone(),
            tensors,
            metadata,
        }
    }

    fn get(&self, name: &str, shape: &[usize]) -> Result<&[f64]> {
        let t = self
            .tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| CoherenceError::ShapeMismatch(format!("checkpoint lacks tensor {name}")))?;
        if t.shape != shape || t.values.len() != shape.iter().product::<usize>() {
            return Err(CoherenceError::ShapeMismatch(format!(
                "tensor {name} has shape {:?} ({} values), expected {shape:?}",
                t.shape,
                t.values.len()
            )));
        }
        Ok(&t.values)
    }

    pub fn into_model(self) -> Result<CoherenceModel> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(CoherenceError::InvalidConfig(format!(
                "unknown checkpoint format {:?}",
                self.format
            )));
        }
        let cfg = &self.config;
        cfg.validate()?;
        let (v, d, nf) = (self.vocab.len(), cfg.embedding_dim, cfg.num_filters);
        let k = cfg.window_size() * d;
        let pooled = cfg.pooled_len();
        let arr1 =
            |name: &str, len: usize| -> Result<Array1<f64>> { Ok(Array1::from(self.get(name, &[len])?.to_vec())) };
        let arr2 = |name: &str, r: usize, c: usize| -> Result<Array2<f64>> {
            Ok(Array2::from_shape_vec((r, c), self.get(name, &[r, c])?.to_vec()).expect("shape checked"))
        };
        let params = ModelParams {
            embeddings: arr2("embeddings", v, d)?,
            filters: arr2("filters", nf, k)?,
            filter_bias: arr1("filter_bias", nf)?,
            batchnorm: BatchNorm {
                gamma: arr1("bn_gamma", nf)?,
                beta: arr1("bn_beta", nf)?,
                running_mean: arr1("bn_running_mean", nf)?,
                running_var: arr1("bn_running_var", nf)?,
                momentum: cfg.bn_momentum,
                epsilon: cfg.bn_epsilon,
            },
            score_weights: arr1("score_weights", pooled)?,
            score_bias: self.get("score_bias", &[1])?[0],
        };
        Ok(CoherenceModel {
            config: self.config,
            vocab: self.vocab,
            params,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Checkpoint> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        Checkpoint::from_json(&std::fs::read_to_string(path)?)
    }
}
