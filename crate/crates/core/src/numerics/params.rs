use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Matrix;
use crate::error::{Error, Result};

/// Checkpoint format version written into every parameter file.
pub const CHECKPOINT_VERSION: u32 = 1;

/// Index of a parameter inside a [`ParamBlock`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Matrix,
    pub grad: Matrix,
    /// RMSprop running average of squared gradients.
    pub sq_avg: Matrix,
}

/// Named parameters, each paired with a same-shaped gradient accumulator
/// and optimizer state.
#[derive(Debug, Clone, Default)]
pub struct ParamBlock {
    params: Vec<Param>,
}

impl ParamBlock {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter initialised uniformly in `±1/√fan_in`.
    pub fn add_uniform<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        fan_in: usize,
        rng: &mut R,
    ) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        self.add(name, Matrix::from_vec(rows, cols, data).expect("shape"))
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        let name = name.into();
        assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter name `{name}`"
        );
        let (r, c) = value.shape();
        self.params.push(Param {
            name,
            value,
            grad: Matrix::zeros(r, c),
            sq_avg: Matrix::zeros(r, c),
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Matrix {
        &self.params[id.0].grad
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.params[id.0].grad
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Copies parameter values (not gradients or optimizer state) from `other`.
    pub fn copy_values_from(&mut self, other: &ParamBlock) -> Result<()> {
        if self.params.len() != other.params.len() {
            return Err(Error::Checkpoint(format!(
                "parameter count mismatch: {} vs {}",
                self.params.len(),
                other.params.len()
            )));
        }
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            if dst.name != src.name || dst.value.shape() != src.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{}` does not match `{}`",
                    dst.name, src.name
                )));
            }
            dst.value.as_mut_slice().copy_from_slice(src.value.as_slice());
        }
        Ok(())
    }

    /// One RMSprop step over every parameter, then clears gradients:
    ///
    /// ```text
    /// s ← α·s + (1−α)·g²
    /// θ ← θ − lr·g / √(s + eps)
    /// ```
    pub fn rmsprop_step(&mut self, lr: f64, alpha: f64, eps: f64) -> Result<()> {
        if let Some(p) = self.params.iter().find(|p| !p.grad.is_finite()) {
            return Err(Error::NonFiniteGradient {
                name: p.name.clone(),
            });
        }
        for p in &mut self.params {
            let g = p.grad.as_slice();
            let s = p.sq_avg.as_mut_slice();
            let theta = p.value.as_mut_slice();
            for ((t, s), &g) in theta.iter_mut().zip(s.iter_mut()).zip(g) {
                *s = alpha * *s + (1.0 - alpha) * g * g;
                *t -= lr * g / (*s + eps).sqrt();
            }
            p.grad.fill(0.0);
        }
        Ok(())
    }

    /// Global L2 norm of the accumulated gradients.
    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .flat_map(|p| p.grad.as_slice())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            params: self
                .params
                .iter()
                .map(|p| {
                    (
                        p.name.clone(),
                        ParamRecord {
                            shape: [p.value.rows(), p.value.cols()],
                            values: p.value.as_slice().to_vec(),
                        },
                    )
                })
                .collect(),
        }
    }

    /// Overwrites values from a checkpoint. Every parameter of this block must
    /// be present with an identical shape.
    pub fn load_checkpoint(&mut self, ckpt: &Checkpoint) -> Result<()> {
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {}",
                ckpt.version
            )));
        }
        for p in &mut self.params {
            let rec = ckpt
                .params
                .get(&p.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{}`", p.name)))?;
            if rec.shape != [p.value.rows(), p.value.cols()] || rec.values.len() != p.value.len() {
                return Err(Error::Checkpoint(format!(
                    "shape mismatch for `{}`: {:?} vs {:?}",
                    p.name,
                    rec.shape,
                    p.value.shape()
                )));
            }
            p.value.as_mut_slice().copy_from_slice(&rec.values);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamRecord {
    pub shape: [usize; 2],
    pub values: Vec<f64>,
}

/// JSON checkpoint: `{"version": 1, "params": {name: {shape, values}}}` with
/// row-major values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub params: BTreeMap<String, ParamRecord>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        serde_json::to_writer(std::io::BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let ckpt: Checkpoint = serde_json::from_reader(std::io::BufReader::new(file))?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {}",
                ckpt.version
            )));
        }
        Ok(ckpt)
    }
}
