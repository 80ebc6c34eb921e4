use std::collections::HashMap;
use std::hash::Hasher;
use std::ops::Index;

use fnv::FnvHasher;

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    /// Frozen tensors are bound as constants and skipped by optimizers.
    pub frozen: bool,
}

/// Named parameter registry, in registration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, frozen: bool) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Integrity(format!("parameter {name} registered twice")));
        }
        let id = ParamId(self.params.len());
        self.index.insert(name.clone(), id);
        self.params.push(Param {
            name,
            value,
            frozen,
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Param> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(Error::dim("set_value", p.value.shape(), value.shape()));
        }
        p.value = value;
        Ok(())
    }

    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| !p.frozen).map(|p| p.value.len()).sum()
    }

    pub fn frozen_count(&self) -> usize {
        self.params.iter().filter(|p| p.frozen).map(|p| p.value.len()).sum()
    }

    /// FNV-1a over names and bit patterns of every tensor matching `pick`.
    pub fn checksum(&self, pick: impl Fn(&Param) -> bool) -> u64 {
        let mut h = FnvHasher::default();
        for p in self.params.iter().filter(|p| pick(p)) {
            h.write(p.name.as_bytes());
            for d in p.value.shape() {
                h.write_u64(*d as u64);
            }
            for x in p.value.data() {
                h.write_u64(x.to_bits());
            }
        }
        h.finish()
    }

    pub fn frozen_checksum(&self) -> u64 {
        self.checksum(|p| p.frozen)
    }

    /// Places every parameter on `graph`: trainable ones as gradient leaves,
    /// frozen ones as constants.
    pub fn bind<'g>(&self, graph: &'g Graph) -> Bound<'g> {
        let vars = self
            .params
            .iter()
            .map(|p| {
                if p.frozen {
                    graph.constant(p.value.clone())
                } else {
                    graph.param(p.value.clone())
                }
            })
            .collect();
        Bound { graph, vars }
    }
}

/// Parameters placed on one graph, indexable by [`ParamId`].
pub struct Bound<'g> {
    graph: &'g Graph,
    vars: Vec<Var<'g>>,
}

impl<'g> Bound<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    /// Gradients of every parameter (zeros where none flowed).
    pub fn grads(&self, store: &ParamStore) -> Vec<Tensor> {
        self.vars
            .iter()
            .zip(&store.params)
            .map(|(v, p)| v.grad().unwrap_or_else(|| Tensor::zeros(p.value.shape())))
            .collect()
    }
}

impl<'g> Index<ParamId> for Bound<'g> {
    type Output = Var<'g>;

    fn index(&self, id: ParamId) -> &Var<'g> {
        &self.vars[id.0]
    }
}
