//! Named parameter storage, kept outside the tape so graphs are per-step.

use std::collections::HashMap;

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Handle to a parameter in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Ordered, named collection of trainable arrays.
#[derive(Default, Clone)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<ArrayD<f64>>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, value: ArrayD<f64>) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        self.index.insert(name.clone(), self.values.len());
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<f64> {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut ArrayD<f64> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalar elements across all parameters.
    pub fn num_elements(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &ArrayD<f64>)> {
        self.values
            .iter()
            .enumerate()
            .map(|(i, v)| (ParamId(i), self.names[i].as_str(), v))
    }

    /// Overwrite a parameter by name; the shape must match.
    pub fn set(&mut self, name: &str, value: ArrayD<f64>) -> Result<(), String> {
        let id = self
            .id(name)
            .ok_or_else(|| format!("unknown parameter {name}"))?;
        if self.values[id.0].shape() != value.shape() {
            return Err(format!(
                "parameter {name}: shape {:?} does not match stored {:?}",
                value.shape(),
                self.values[id.0].shape()
            ));
        }
        self.values[id.0] = value;
        Ok(())
    }
}

pub fn zeros(shape: &[usize]) -> ArrayD<f64> {
    ArrayD::zeros(IxDyn(shape))
}

pub fn full(shape: &[usize], v: f64) -> ArrayD<f64> {
    ArrayD::from_elem(IxDyn(shape), v)
}

pub fn normal(shape: &[usize], std: f64, rng: &mut impl Rng) -> ArrayD<f64> {
    let dist = Normal::new(0.0, std).expect("std must be finite");
    ArrayD::from_shape_simple_fn(IxDyn(shape), || dist.sample(rng))
}

/// He-style init for convolutions and linear layers feeding ReLU/GELU.
pub fn he_normal(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> ArrayD<f64> {
    normal(shape, (2.0 / fan_in as f64).sqrt(), rng)
}
