use std::collections::HashMap;

use sha2::{Digest, Sha256};

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// A named model tensor. Frozen parameters never receive gradient updates.
#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub trainable: bool,
    pub grad: Tensor<T>,
}

/// Owns every parameter of a model, addressed by unique dotted name.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn register(&mut self, name: impl Into<String>, tensor: Tensor<T>, trainable: bool) -> Result<ParamId> {
        let name = name.into();
        if name.is_empty() {
            return Err(Error::Parameter("unnamed parameter encountered".into()));
        }
        if self.by_name.contains_key(&name) {
            return Err(Error::Parameter(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.params.len());
        let grad = Tensor::zeros(tensor.shape().to_vec());
        self.params.push(Parameter {
            name: name.clone(),
            tensor,
            trainable,
            grad,
        });
        self.by_name.insert(name, id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].tensor
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect()
    }

    pub fn frozen_ids(&self) -> Vec<ParamId> {
        self.iter().filter(|(_, p)| !p.trainable).map(|(id, _)| id).collect()
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    /// Resets every gradient accumulator to zero. Gradients accumulate
    /// additively until this is called.
    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
        }
    }

    /// Adds `grad` into the accumulator of `id`. Frozen parameters are skipped.
    pub fn accumulate_grad(&mut self, id: ParamId, grad: &Tensor<T>) -> Result<()> {
        let p = &mut self.params[id.0];
        if !p.trainable {
            return Ok(());
        }
        if p.grad.shape() != grad.shape() {
            return Err(Error::ShapeMismatch {
                op: "accumulate_grad",
                lhs: p.grad.shape().to_vec(),
                rhs: grad.shape().to_vec(),
            });
        }
        for (a, &g) in p.grad.data_mut().iter_mut().zip(grad.data()) {
            *a += g;
        }
        Ok(())
    }

    /// Total number of scalars in trainable and frozen parameters.
    pub fn counts(&self) -> (usize, usize) {
        self.params.iter().fold((0, 0), |(t, f), p| {
            if p.trainable {
                (t + p.tensor.len(), f)
            } else {
                (t, f + p.tensor.len())
            }
        })
    }

    /// SHA-256 over the names, shapes and exact bit patterns of the given parameters.
    pub fn digest(&self, ids: &[ParamId]) -> String {
        let mut h = Sha256::new();
        for &id in ids {
            let p = &self.params[id.0];
            h.update(p.name.as_bytes());
            for &d in p.tensor.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in p.tensor.data() {
                h.update(v.as_f64().to_bits().to_le_bytes());
            }
        }
        hex(&h.finalize())
    }

    /// Per-parameter digests, keyed by name.
    pub fn digests(&self) -> Vec<(String, String)> {
        self.iter()
            .map(|(id, p)| (p.name.clone(), self.digest(&[id])))
            .collect()
    }

    /// Copies tensor values by name from `other`. Shapes must agree.
    pub fn load_values(&mut self, other: &ParamStore<T>) -> Result<()> {
        for p in &mut self.params {
            let src = other
                .id(&p.name)
                .ok_or_else(|| Error::Parameter(format!("missing parameter {}", p.name)))?;
            let src = other.tensor(src);
            if src.shape() != p.tensor.shape() {
                return Err(Error::ShapeMismatch {
                    op: "load_values",
                    lhs: p.tensor.shape().to_vec(),
                    rhs: src.shape().to_vec(),
                });
            }
            p.tensor = src.clone();
        }
        Ok(())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
