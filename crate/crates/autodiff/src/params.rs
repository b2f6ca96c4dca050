use std::ops::Index;

use crate::error::Result;
use crate::graph::{Gradients, Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry<S> {
    pub name: String,
    pub value: Tensor<S>,
    pub trainable: bool,
}

/// Named, ordered parameter collection owned by a model.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<S> {
    entries: Vec<ParamEntry<S>>,
}

impl<S> Default for ParamStore<S> {
    fn default() -> Self {
        Self { entries: Vec::new() }
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a trainable parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<S>) -> ParamId {
        let name = name.into();
        assert!(self.find(&name).is_none(), "duplicate parameter name `{name}`");
        self.entries.push(ParamEntry {
            name,
            value,
            trainable: true,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<S> {
        &self.entries[id.0]
    }

    pub fn entries(&self) -> &[ParamEntry<S>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry<S>] {
        &mut self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    /// Sets the trainable flag on every parameter whose name satisfies `pred`.
    pub fn set_trainable(&mut self, pred: impl Fn(&str) -> bool, trainable: bool) {
        for e in self.entries.iter_mut().filter(|e| pred(&e.name)) {
            e.trainable = trainable;
        }
    }

    /// Records every parameter as a leaf; trainable ones receive gradients.
    pub fn bind(&self, g: &mut Graph<S>) -> Result<Bound> {
        let vars = self
            .entries
            .iter()
            .map(|e| g.leaf(e.value.clone(), e.trainable))
            .collect::<Result<_>>()?;
        Ok(Bound { vars })
    }

    /// FNV-1a over names and value bits of the parameters selected by `pred`.
    pub fn checksum(&self, pred: impl Fn(&str) -> bool) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |bytes: &[u8]| {
            for &b in bytes {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for e in self.entries.iter().filter(|e| pred(&e.name)) {
            feed(e.name.as_bytes());
            for v in e.value.data() {
                feed(&v.f64().to_bits().to_le_bytes());
            }
        }
        h
    }

    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    value: e.value.cast(),
                    trainable: e.trainable,
                })
                .collect(),
        }
    }
}

/// Graph variables of a [`ParamStore`] bound for one forward pass.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Per-parameter gradients in store order; `None` where no gradient flowed.
    pub fn grads<S: Scalar>(&self, grads: &mut Gradients<S>) -> Vec<Option<Tensor<S>>> {
        self.vars.iter().map(|&v| grads.take(v)).collect()
    }
}

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}
