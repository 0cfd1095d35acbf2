use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Weight,
    Bias,
    NormScale,
    NormShift,
    /// Batch-norm running statistics: persisted, never optimized or counted.
    RunningMean,
    RunningVar,
}

impl ParamKind {
    pub fn is_buffer(self) -> bool {
        matches!(self, ParamKind::RunningMean | ParamKind::RunningVar)
    }
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub kind: ParamKind,
    pub value: Arc<Tensor>,
    pub trainable: bool,
}

impl Param {
    pub fn is_optimized(&self) -> bool {
        self.trainable && !self.kind.is_buffer()
    }
}

/// Named parameter tensors and batch-norm buffers of one model.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor) -> ParamId {
        let id = ParamId(self.params.len());
        self.params.push(Param {
            name: name.into(),
            kind,
            value: Arc::new(value),
            trainable: true,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn shared(&self, id: ParamId) -> Arc<Tensor> {
        Arc::clone(&self.params[id.0].value)
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        Arc::make_mut(&mut self.params[id.0].value)
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let slot = &mut self.params[id.0];
        if slot.value.shape() != value.shape() {
            return Err(Error::ShapeMismatch(format!(
                "{}: expected {:?}, got {:?}",
                slot.name,
                slot.value.shape(),
                value.shape()
            )));
        }
        slot.value = Arc::new(value);
        Ok(())
    }

    pub fn replace(&mut self, id: ParamId, value: Tensor) {
        self.params[id.0].value = Arc::new(value);
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Trainable scalars, biases and normalization affine terms included.
    pub fn count_trainable(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.is_optimized())
            .map(|p| p.value.numel())
            .sum()
    }

    /// Freezes every parameter whose name starts with `prefix`; returns how
    /// many scalars stopped being trainable.
    pub fn freeze(&mut self, prefix: &str) -> usize {
        self.set_trainable(prefix, false)
    }

    pub fn unfreeze(&mut self, prefix: &str) -> usize {
        self.set_trainable(prefix, true)
    }

    fn set_trainable(&mut self, prefix: &str, trainable: bool) -> usize {
        let mut changed = 0;
        for p in &mut self.params {
            if p.name.starts_with(prefix) && p.trainable != trainable {
                p.trainable = trainable;
                if !p.kind.is_buffer() {
                    changed += p.value.numel();
                }
            }
        }
        changed
    }
}

/// Fan-in scaled normal initialization, `std = gain * sqrt(2 / fan_in)`.
pub fn he_normal<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, gain: f64, rng: &mut R) -> Tensor {
    let std = gain * (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("finite std");
    let n = shape.iter().product();
    let data = (0..n).map(|_| dist.sample(rng) as f32).collect();
    Tensor::from_vec(shape, data).expect("shape matches")
}
