//! Trainable parameter storage: named dense tensors with paired gradient
//! buffers. The tape records leaves against `ParamId`s and accumulates
//! gradients back into the store after a backward pass.

use ndarray::Array2;
use rand::Rng;

use crate::error::{Error, Result};

/// Handle to one parameter tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Array2<f64>>,
    grads: Vec<Array2<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self { names: Vec::new(), values: Vec::new(), grads: Vec::new() }
    }

    /// Register a tensor. Names must be unique; registration order is the
    /// canonical parameter order used by checkpoints and the optimizer.
    pub fn add(&mut self, name: &str, value: Array2<f64>) -> ParamId {
        assert!(
            !self.names.iter().any(|n| n == name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.values.len());
        self.names.push(name.to_string());
        self.grads.push(Array2::zeros(value.raw_dim()));
        self.values.push(value);
        id
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> &Array2<f64> {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &Array2<f64> {
        &self.grads[id.0]
    }

    pub(crate) fn grad_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.grads[id.0]
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.fill(0.0);
        }
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.values.len()).map(ParamId)
    }

    /// Replace a tensor's values, keeping its shape.
    pub fn set_value(&mut self, id: ParamId, value: Array2<f64>) -> Result<()> {
        if value.raw_dim() != self.values[id.0].raw_dim() {
            return Err(Error::Shape {
                op: "set_value",
                detail: format!(
                    "parameter {} has shape {:?}, got {:?}",
                    self.names[id.0],
                    self.values[id.0].shape(),
                    value.shape()
                ),
            });
        }
        self.values[id.0] = value;
        Ok(())
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

/// Uniform init on (-1/sqrt(d), 1/sqrt(d)) for embedding tables of width d.
pub fn embedding_init(rows: usize, d: usize, rng: &mut impl Rng) -> Array2<f64> {
    let scale = 1.0 / (d as f64).sqrt();
    Array2::from_shape_fn((rows, d), |_| rng.random_range(-scale..scale))
}

/// Uniform init on (-1/sqrt(fan_in), 1/sqrt(fan_in)) for linear layers.
pub fn linear_init(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Array2<f64> {
    let scale = 1.0 / (fan_in as f64).sqrt();
    Array2::from_shape_fn((fan_in, fan_out), |_| rng.random_range(-scale..scale))
}
