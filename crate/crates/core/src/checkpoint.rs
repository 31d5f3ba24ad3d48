//! Versioned model checkpoints: named parameter tensors with shape
//! headers, serialized as JSON. Floats use the shortest round-trip
//! representation, so save/load is exact.
//!
//! Tensor names: `hidden{l}.weight` / `hidden{l}.bias` for hidden layers,
//! `classifier.weight` for the final layer; unconstrained-features
//! checkpoints carry `classifier.weight` and `features`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Activation, Mlp};
use crate::numkit::matrix::Matrix;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl TensorRecord {
    fn from_matrix(name: &str, m: &Matrix) -> TensorRecord {
        TensorRecord {
            name: name.to_string(),
            rows: m.rows(),
            cols: m.cols(),
            data: m.data().to_vec(),
        }
    }

    fn to_matrix(&self) -> Result<Matrix> {
        Matrix::from_vec(self.rows, self.cols, self.data.clone())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub activation: Option<Activation>,
    pub tensors: Vec<TensorRecord>,
}

impl Checkpoint {
    pub fn from_mlp(mlp: &Mlp) -> Checkpoint {
        let mut tensors = Vec::new();
        let layers = mlp.weights.len();
        for l in 0..layers - 1 {
            tensors.push(TensorRecord::from_matrix(
                &format!("hidden{l}.weight"),
                &mlp.weights[l],
            ));
            let b = &mlp.biases[l];
            tensors.push(TensorRecord {
                name: format!("hidden{l}.bias"),
                rows: 1,
                cols: b.len(),
                data: b.clone(),
            });
        }
        tensors.push(TensorRecord::from_matrix(
            "classifier.weight",
            mlp.classifier(),
        ));
        Checkpoint {
            format_version: FORMAT_VERSION,
            activation: Some(mlp.activation),
            tensors,
        }
    }

    /// Checkpoint of an unconstrained-features run: classifier plus the
    /// free feature matrix.
    pub fn from_peeled(w: &Matrix, h: &Matrix) -> Checkpoint {
        Checkpoint {
            format_version: FORMAT_VERSION,
            activation: None,
            tensors: vec![
                TensorRecord::from_matrix("classifier.weight", w),
                TensorRecord::from_matrix("features", h),
            ],
        }
    }

    pub fn tensor(&self, name: &str) -> Result<Matrix> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::InvalidSpec(format!("checkpoint has no tensor `{name}`")))?
            .to_matrix()
    }

    pub fn classifier(&self) -> Result<Matrix> {
        self.tensor("classifier.weight")
    }

    /// Rebuilds an MLP; fails unless the tensor set forms a complete layer
    /// chain.
    pub fn to_mlp(&self) -> Result<Mlp> {
        let activation = self.activation.unwrap_or(Activation::Relu);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        let mut l = 0;
        loop {
            let name = format!("hidden{l}.weight");
            if !self.tensors.iter().any(|t| t.name == name) {
                break;
            }
            weights.push(self.tensor(&name)?);
            let b = self.tensor(&format!("hidden{l}.bias"))?;
            biases.push(b.data().to_vec());
            l += 1;
        }
        weights.push(self.classifier()?);
        let mut dims = vec![weights[0].cols()];
        for w in &weights {
            if w.cols() != *dims.last().unwrap() {
                return Err(Error::Dimension(format!(
                    "layer chain broken at a {}x{} weight",
                    w.rows(),
                    w.cols()
                )));
            }
            dims.push(w.rows());
        }
        Ok(Mlp {
            dims,
            weights,
            biases,
            activation,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_vec(self)?;
        fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = fs::read(path)?;
        let ckpt: Checkpoint = serde_json::from_slice(&bytes)?;
        if ckpt.format_version != FORMAT_VERSION {
            return Err(Error::InvalidSpec(format!(
                "checkpoint format {} unsupported (expected {})",
                ckpt.format_version, FORMAT_VERSION
            )));
        }
        Ok(ckpt)
    }
}
