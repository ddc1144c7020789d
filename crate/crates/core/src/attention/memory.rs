use crate::tensor::Tensor;

/// Per-layer recurrence memory: the most recent `mem_len` block inputs,
/// stored as plain values so nothing downstream can backpropagate into
/// them.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryState {
    mem_len: usize,
    d_model: usize,
    layers: Vec<Vec<f64>>,
}

impl MemoryState {
    pub fn new(n_layers: usize, d_model: usize, mem_len: usize) -> Self {
        Self {
            mem_len,
            d_model,
            layers: vec![Vec::new(); n_layers],
        }
    }

    pub fn mem_len(&self) -> usize {
        self.mem_len
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn len(&self, layer: usize) -> usize {
        self.layers[layer].len() / self.d_model
    }

    pub fn is_empty(&self) -> bool {
        self.layers.iter().all(Vec::is_empty)
    }

    /// Row-major `[len, d_model]` contents of one layer.
    pub fn layer(&self, layer: usize) -> &[f64] {
        &self.layers[layer]
    }

    /// The last `rows` rows of a layer as a tensor, or `None` if empty.
    pub fn tail(&self, layer: usize, rows: usize) -> Option<Tensor> {
        let have = self.len(layer);
        let take = rows.min(have);
        if take == 0 {
            return None;
        }
        let d = self.d_model;
        let data = self.layers[layer][(have - take) * d..].to_vec();
        Some(Tensor::from_parts(vec![take, d], data))
    }

    /// Appends rows and keeps only the most recent `mem_len`.
    pub fn push(&mut self, layer: usize, rows: &[f64]) {
        debug_assert_eq!(rows.len() % self.d_model, 0);
        let buf = &mut self.layers[layer];
        buf.extend_from_slice(rows);
        let cap = self.mem_len * self.d_model;
        if buf.len() > cap {
            buf.drain(..buf.len() - cap);
        }
    }

    pub fn clear(&mut self) {
        self.layers.iter_mut().for_each(Vec::clear);
    }

    pub fn set_layer(&mut self, layer: usize, rows: Vec<f64>) {
        self.layers[layer] = Vec::new();
        self.push(layer, &rows);
    }
}

/// Functional form of the memory update for one layer: the result holds the
/// last `mem_len` rows of `[old ∥ new_hidden]`.
pub fn update_memory(memory: &MemoryState, layer: usize, new_hidden: &Tensor) -> MemoryState {
    let mut next = memory.clone();
    next.push(layer, new_hidden.data());
    next
}
