use std::collections::HashMap;

use sha2::{Digest, Sha256};

use super::tensor::{Real, Tensor};
use crate::error::{invalid, shape_err, Result};

/// Stable handle to a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
    pub frozen: bool,
}

/// Owns every named parameter of a model; layers refer to entries by [`ParamId`].
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(invalid!("duplicate parameter name `{name}`"));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            value,
            grad: None,
            frozen: false,
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Overwrites a parameter value. Frozen parameters refuse the write.
    pub fn set_value(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.frozen {
            return Err(crate::Error::FrozenParameter(p.name.clone()));
        }
        p.value = value;
        p.grad = None;
        Ok(())
    }

    /// Like [`set_value`](Self::set_value) but requires the shape to be unchanged.
    pub fn load_value(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let current = self.params[id.0].value.shape();
        if current != value.shape() {
            return Err(shape_err!(
                "parameter `{}` has shape {current:?}, got {:?}",
                self.params[id.0].name,
                value.shape()
            ));
        }
        self.set_value(id, value)
    }

    pub fn freeze(&mut self, id: ParamId) {
        let p = &mut self.params[id.0];
        p.frozen = true;
        p.grad = None;
    }

    pub fn unfreeze(&mut self, id: ParamId) {
        self.params[id.0].frozen = false;
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.params[id.0].frozen
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Adds `delta` into the gradient slot, allocating it on first use.
    pub(crate) fn accumulate_grad(&mut self, id: ParamId, delta: &[T]) {
        let p = &mut self.params[id.0];
        match &mut p.grad {
            Some(g) => {
                for (a, &d) in g.data_mut().iter_mut().zip(delta) {
                    *a += d;
                }
            }
            None => {
                let mut g = Tensor::zeros(p.value.shape());
                g.data_mut().copy_from_slice(delta);
                p.grad = Some(g);
            }
        }
    }

    /// SHA-256 over names, shapes and little-endian values of the given parameters.
    pub fn checksum(&self, ids: &[ParamId]) -> String {
        let mut hasher = Sha256::new();
        let mut buf = Vec::new();
        for &id in ids {
            let p = &self.params[id.0];
            hasher.update(p.name.as_bytes());
            for &d in p.value.shape() {
                hasher.update((d as u64).to_le_bytes());
            }
            buf.clear();
            for &v in p.value.data() {
                v.write_le(&mut buf);
            }
            hasher.update(&buf);
        }
        hex::encode(hasher.finalize())
    }
}
