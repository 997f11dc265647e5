use std::collections::HashMap;

use crate::autodiff::{Gradients, Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameters with one gradient slot each, in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T: Scalar> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    grads: Vec<Tensor<T>>,
    lookup: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { names: Vec::new(), values: Vec::new(), grads: Vec::new(), lookup: HashMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.lookup.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let id = self.names.len();
        self.lookup.insert(name.clone(), id);
        self.grads.push(Tensor::zeros(value.shape().to_vec()));
        self.values.push(value);
        self.names.push(name);
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.names.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.lookup.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<T> {
        &self.grads[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.names.iter().zip(&self.values).enumerate().map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
    }

    /// Places every parameter on the tape; the returned vars are indexed by
    /// [`ParamId::index`].
    pub fn bind(&self, g: &mut Graph<T>) -> Vec<Var> {
        self.values.iter().map(|v| g.param(v.clone())).collect()
    }

    /// Copies tape gradients into the slots, rejecting non-finite ones.
    pub fn store_grads(&mut self, graph: &Graph<T>, grads: &Gradients<T>, vars: &[Var]) -> Result<()> {
        for (i, &v) in vars.iter().enumerate() {
            let g = grads.wrt(graph, v)?;
            if !g.is_finite() {
                return Err(Error::NonFinite { op: format!("gradient of {}", self.names[i]), node: v.index() });
            }
            self.grads[i] = g;
        }
        Ok(())
    }

    /// Overwrites values from `(name, tensor)` pairs that must cover the
    /// store exactly, with matching shapes.
    pub fn load_named(&mut self, entries: Vec<(String, Tensor<T>)>) -> Result<()> {
        if entries.len() != self.len() {
            return Err(Error::Checkpoint(format!("expected {} tensors, found {}", self.len(), entries.len())));
        }
        for (name, t) in entries {
            let id = self.id(&name).ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
            if t.shape() != self.values[id.0].shape() {
                return Err(Error::Checkpoint(format!(
                    "shape of {name}: expected {:?}, found {:?}",
                    self.values[id.0].shape(),
                    t.shape()
                )));
            }
            self.values[id.0] = t;
        }
        Ok(())
    }
}
