//! Checkpoint container: GNN parameters and prompts in one JSON document
//! with explicit shape headers. Finite f64 values round-trip bit-exactly
//! through serde_json's shortest-representation formatting.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gnn::{Classifier, FrozenFlags, GnnParams};
use crate::prompt::GraphPrompt;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixData {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl MatrixData {
    pub fn from_matrix(m: &DMatrix<f64>) -> Self {
        let mut data = Vec::with_capacity(m.nrows() * m.ncols());
        for r in 0..m.nrows() {
            for c in 0..m.ncols() {
                data.push(m[(r, c)]);
            }
        }
        MatrixData { rows: m.nrows(), cols: m.ncols(), data }
    }

    pub fn to_matrix(&self) -> Result<DMatrix<f64>> {
        if self.data.len() != self.rows * self.cols {
            return Err(Error::DimensionMismatch {
                msg: format!(
                    "matrix header says {}x{} but {} values present",
                    self.rows,
                    self.cols,
                    self.data.len()
                ),
            });
        }
        Ok(DMatrix::from_row_slice(self.rows, self.cols, &self.data))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GnnCheckpoint {
    pub layer1: MatrixData,
    pub layer2: MatrixData,
    pub classifier_weights: MatrixData,
    pub classifier_bias: Vec<f64>,
    pub frozen_layer1: bool,
    pub frozen_layer2: bool,
    pub frozen_classifier: bool,
}

impl GnnCheckpoint {
    pub fn from_params(p: &GnnParams) -> Self {
        GnnCheckpoint {
            layer1: MatrixData::from_matrix(&p.layer1),
            layer2: MatrixData::from_matrix(&p.layer2),
            classifier_weights: MatrixData::from_matrix(&p.classifier.weights),
            classifier_bias: p.classifier.bias.iter().copied().collect(),
            frozen_layer1: p.frozen.layer1,
            frozen_layer2: p.frozen.layer2,
            frozen_classifier: p.frozen.classifier,
        }
    }

    pub fn to_params(&self) -> Result<GnnParams> {
        let params = GnnParams {
            layer1: self.layer1.to_matrix()?,
            layer2: self.layer2.to_matrix()?,
            classifier: Classifier {
                weights: self.classifier_weights.to_matrix()?,
                bias: DVector::from_vec(self.classifier_bias.clone()),
            },
            frozen: FrozenFlags {
                layer1: self.frozen_layer1,
                layer2: self.frozen_layer2,
                classifier: self.frozen_classifier,
            },
        };
        params.validate()?;
        Ok(params)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptCheckpoint {
    pub token_features: MatrixData,
    pub inner_prune_threshold: f64,
    pub cross_prune_threshold: f64,
    pub learnable: bool,
}

impl PromptCheckpoint {
    pub fn from_prompt(p: &GraphPrompt) -> Self {
        PromptCheckpoint {
            token_features: MatrixData::from_matrix(&p.token_features),
            inner_prune_threshold: p.inner_prune_threshold,
            cross_prune_threshold: p.cross_prune_threshold,
            learnable: p.learnable,
        }
    }

    pub fn to_prompt(&self) -> Result<GraphPrompt> {
        Ok(GraphPrompt {
            token_features: self.token_features.to_matrix()?,
            inner_prune_threshold: self.inner_prune_threshold,
            cross_prune_threshold: self.cross_prune_threshold,
            learnable: self.learnable,
        })
    }
}

/// The on-disk container. `prompts` is keyed by role ("benign", "trigger");
/// a BTreeMap keeps serialization order stable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub gnn: GnnCheckpoint,
    #[serde(default)]
    pub prompts: std::collections::BTreeMap<String, PromptCheckpoint>,
}

impl Checkpoint {
    pub fn new(params: &GnnParams) -> Self {
        Checkpoint {
            version: FORMAT_VERSION,
            gnn: GnnCheckpoint::from_params(params),
            prompts: Default::default(),
        }
    }

    pub fn with_prompt(mut self, role: &str, prompt: &GraphPrompt) -> Self {
        self.prompts.insert(role.to_string(), PromptCheckpoint::from_prompt(prompt));
        self
    }

    pub fn prompt(&self, role: &str) -> Result<GraphPrompt> {
        self.prompts
            .get(role)
            .ok_or_else(|| Error::Config { msg: format!("checkpoint has no '{role}' prompt") })?
            .to_prompt()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text)
            .map_err(|source| Error::Io { path: path.display().to_string(), source })
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let text = fs::read_to_string(path)
            .map_err(|source| Error::Io { path: path.display().to_string(), source })?;
        let ckpt: Checkpoint = serde_json::from_str(&text)?;
        if ckpt.version != FORMAT_VERSION {
            return Err(Error::Config {
                msg: format!("unsupported checkpoint version {}", ckpt.version),
            });
        }
        Ok(ckpt)
    }
}
