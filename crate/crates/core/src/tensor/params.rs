use std::collections::BTreeMap;

use super::{Graph, Tensor};
use crate::error::{contract, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named learnable tensors. Cloning is cheap (storage is shared until a
/// writer touches it), which is how actor snapshots are produced.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// All parameters flattened into one vector, in id order.
    pub fn flatten(&self) -> Vec<f64> {
        self.values
            .iter()
            .flat_map(|t| t.data().iter().copied())
            .collect()
    }

    pub fn unflatten(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_scalars() {
            return Err(contract(format!(
                "flat parameter vector has {} entries, store holds {}",
                flat.len(),
                self.num_scalars()
            )));
        }
        let mut off = 0;
        for v in &mut self.values {
            let n = v.numel();
            v.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    pub fn shapes(&self) -> BTreeMap<String, Vec<usize>> {
        self.iter()
            .map(|(_, n, t)| (n.to_string(), t.shape().to_vec()))
            .collect()
    }
}

/// Gradient buffers aligned with a [`ParamStore`]. Accumulation is `+=`;
/// call [`Gradients::zero`] between optimizer steps.
#[derive(Clone, Debug)]
pub struct Gradients {
    bufs: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            bufs: store.values.iter().map(|t| vec![0.0; t.numel()]).collect(),
        }
    }

    pub fn zero(&mut self) {
        for b in &mut self.bufs {
            b.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.bufs[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.bufs[id.0]
    }

    pub fn len(&self) -> usize {
        self.bufs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bufs.is_empty()
    }

    pub fn bufs(&self) -> &[Vec<f64>] {
        &self.bufs
    }

    pub fn bufs_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.bufs
    }

    /// Adds every parameter gradient held by `graph` (after backward).
    pub fn accumulate(&mut self, graph: &Graph) {
        for (id, g) in graph.param_grads() {
            for (acc, v) in self.bufs[id.0].iter_mut().zip(g) {
                *acc += v;
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.bufs
            .iter()
            .flat_map(|b| b.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for b in &mut self.bufs {
            b.iter_mut().for_each(|g| *g *= factor);
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.bufs.iter().flatten().copied().collect()
    }
}
