use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Named parameter tensors of one network. Insertion order is the
/// serialization order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    /// Adds a parameter and returns its slot index.
    pub fn push(&mut self, name: &str, tensor: Tensor) -> Result<usize> {
        if self.index_of(name).is_some() {
            return Err(Error::Config(format!("duplicate parameter name {name:?}")));
        }
        self.entries.push((name.to_string(), tensor));
        Ok(self.entries.len() - 1)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|(n, _)| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.entries[i].1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn name(&self, slot: usize) -> &str {
        &self.entries[slot].0
    }

    pub fn tensor(&self, slot: usize) -> &Tensor {
        &self.entries[slot].1
    }

    pub(crate) fn data(&self, slot: usize) -> &[f64] {
        self.entries[slot].1.data()
    }

    /// Mutable access to a tensor's values. The shape stays fixed.
    pub fn data_mut(&mut self, slot: usize) -> &mut [f64] {
        self.entries[slot].1.data_mut()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// All values concatenated in slot order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_scalars());
        for (_, t) in &self.entries {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Overwrites every value from a flat vector produced by [`ParamSet::flatten`].
    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_scalars() {
            return Err(Error::Dimension {
                expected: self.num_scalars(),
                got: flat.len(),
                context: "flat parameter vector",
            });
        }
        let mut offset = 0;
        for (_, t) in &mut self.entries {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Same names and shapes as `other`.
    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((na, ta), (nb, tb))| na == nb && ta.shape() == tb.shape())
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.is_finite())
    }

    /// Exact bitwise equality of all values.
    pub fn bit_eq(&self, other: &ParamSet) -> bool {
        self.same_layout(other)
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((_, a), (_, b))| {
                    a.data()
                        .iter()
                        .zip(b.data())
                        .all(|(x, y)| x.to_bits() == y.to_bits())
                })
    }
}

/// Gradients keyed like a [`ParamSet`]. A parameter outside the trainable
/// set has no entry at all.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    slots: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Zero gradients for every parameter when `trainable`, otherwise none.
    pub fn for_params(params: &ParamSet, trainable: bool) -> Self {
        Gradients {
            names: params.iter().map(|(n, _)| n.to_string()).collect(),
            shapes: params.iter().map(|(_, t)| t.shape().to_vec()).collect(),
            slots: params
                .iter()
                .map(|(_, t)| trainable.then(|| Tensor::zeros(t.shape())))
                .collect(),
        }
    }

    pub fn is_tracking(&self) -> bool {
        self.slots.iter().any(Option::is_some)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        let i = self.names.iter().position(|n| n == name)?;
        self.slots[i].as_ref()
    }

    pub fn slot(&self, slot: usize) -> Option<&Tensor> {
        self.slots[slot].as_ref()
    }

    #[cfg(test)]
    pub(crate) fn slot_mut(&mut self, slot: usize) -> Option<&mut [f64]> {
        self.slots[slot].as_mut().map(|t| t.data_mut())
    }

    /// Disjoint mutable access to two slots, `a < b`.
    pub(crate) fn pair_mut(&mut self, a: usize, b: usize) -> (Option<&mut [f64]>, Option<&mut [f64]>) {
        assert!(a < b, "slot pair must be ordered");
        let (lo, hi) = self.slots.split_at_mut(b);
        (
            lo[a].as_mut().map(|t| t.data_mut()),
            hi[0].as_mut().map(|t| t.data_mut()),
        )
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Number of parameters that carry a gradient entry.
    pub fn num_entries(&self) -> usize {
        self.slots.iter().filter(|s| s.is_some()).count()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(String::as_str)
    }

    pub fn zero(&mut self) {
        for t in self.slots.iter_mut().flatten() {
            t.data_mut().fill(0.0);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.slots.iter_mut().flatten() {
            t.data_mut().iter_mut().for_each(|v| *v *= factor);
        }
    }

    /// Flat gradient vector in slot order; absent entries contribute zeros.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (slot, shape) in self.slots.iter().zip(&self.shapes) {
            match slot {
                Some(t) => out.extend_from_slice(t.data()),
                None => out.extend(std::iter::repeat_n(0.0, shape.iter().product())),
            }
        }
        out
    }

    pub fn matches(&self, params: &ParamSet) -> bool {
        self.names.len() == params.len()
            && params
                .iter()
                .zip(self.names.iter().zip(&self.shapes))
                .all(|((n, t), (gn, gs))| n == gn && t.shape() == gs.as_slice())
    }
}
