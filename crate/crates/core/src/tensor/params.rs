//! Named parameter groups. A `ParamSet` is one group: when frozen, no
//! optimizer step may change it (and graphs skip gradient accumulation for
//! its leaves).

use indexmap::IndexMap;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{Gradients, Graph, Tensor, Var};

#[derive(Debug, Clone)]
pub struct ParamSet {
    tensors: IndexMap<String, Tensor>,
    pub frozen: bool,
}

/// Graph leaves for one bound `ParamSet`, keyed by parameter name.
pub struct BoundParams {
    vars: IndexMap<String, Var>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet {
            tensors: IndexMap::new(),
            frozen: false,
        }
    }

    pub fn insert(&mut self, name: &str, t: Tensor) {
        self.tensors.insert(name.to_string(), t);
    }

    pub fn get(&self, name: &str) -> &Tensor {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name:?}"))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn value_count(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    /// Plain SGD: p -= lr * grad. A frozen set is left untouched and the
    /// call reports false. Missing gradients are treated as zero.
    pub fn sgd_step(&mut self, grads: &IndexMap<String, Tensor>, lr: f64) -> Result<bool> {
        if self.frozen {
            return Ok(false);
        }
        for (name, t) in self.tensors.iter_mut() {
            if let Some(g) = grads.get(name) {
                if g.shape() != t.shape() {
                    return Err(Error::Shape {
                        op: "sgd_step",
                        detail: format!(
                            "grad {:?} vs param {:?} for {name:?}",
                            g.shape(),
                            t.shape()
                        ),
                    });
                }
                for (p, gv) in t.as_mut_slice().iter_mut().zip(g.as_slice()) {
                    *p -= lr * gv;
                }
            }
        }
        Ok(true)
    }

    /// Digest over names, shapes and value bit patterns; any change to any
    /// parameter changes the hash.
    pub fn content_hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for (name, t) in &self.tensors {
            h.update(name.as_bytes());
            h.update([0]);
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.as_slice() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        h.finalize().into()
    }
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("unknown bound parameter {name:?}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Gradient per parameter name; parameters not reached by backward map
    /// to zeros of the right shape.
    pub fn grads(&self, grads: &Gradients) -> IndexMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(name, v)| (name.clone(), grads.get_or_zero(*v)))
            .collect()
    }
}

impl Graph {
    /// Register every parameter of the set as a graph leaf. Leaves of a
    /// frozen set do not accumulate gradients.
    pub fn bind(&mut self, set: &ParamSet) -> BoundParams {
        let vars = set
            .iter()
            .map(|(name, t)| {
                let mut t = t.clone();
                t.requires_grad = !set.frozen;
                (name.to_string(), self.leaf(&t))
            })
            .collect();
        BoundParams { vars }
    }

    /// Like `bind`, but never tracks gradients (pure inference).
    pub fn bind_frozen(&mut self, set: &ParamSet) -> BoundParams {
        let vars = set
            .iter()
            .map(|(name, t)| {
                let mut t = t.clone();
                t.requires_grad = false;
                (name.to_string(), self.leaf(&t))
            })
            .collect();
        BoundParams { vars }
    }
}
