use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::tensor::{Graph, ParamId, ParamStore, Rng, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LstmConfig {
    pub n_layers: usize,
    /// Hidden size; when absent it is chosen so the LSTM has about as many
    /// parameters as a transformer core with `match_transformer_layers`.
    pub hidden: Option<usize>,
    pub match_transformer_layers: usize,
}

impl Default for LstmConfig {
    fn default() -> Self {
        Self {
            n_layers: 4,
            hidden: None,
            match_transformer_layers: 3,
        }
    }
}

/// Parameters of a stacked LSTM fed with `input` features.
pub fn lstm_param_count(input: usize, hidden: usize, n_layers: usize) -> usize {
    (0..n_layers)
        .map(|l| {
            let fan_in = if l == 0 { input } else { hidden };
            4 * hidden * (fan_in + hidden) + 4 * hidden
        })
        .sum()
}

/// Hidden size whose parameter count is closest to `target`.
pub fn matched_hidden(input: usize, n_layers: usize, target: usize) -> usize {
    (1..=4096)
        .min_by_key(|&h| lstm_param_count(input, h, n_layers).abs_diff(target))
        .unwrap()
}

#[derive(Clone, Debug)]
struct LstmLayer {
    w_ih: ParamId,
    w_hh: ParamId,
    b: ParamId,
}

/// Stacked LSTM core. Gate order in the fused weight is input, forget,
/// cell, output.
#[derive(Clone, Debug)]
pub struct LstmCore {
    hidden: usize,
    layers: Vec<LstmLayer>,
}

/// Carried hidden and cell vectors, one per layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmState {
    pub h: Vec<Vec<f64>>,
    pub c: Vec<Vec<f64>>,
}

impl LstmState {
    pub fn zeros(n_layers: usize, hidden: usize) -> Self {
        Self {
            h: vec![vec![0.0; hidden]; n_layers],
            c: vec![vec![0.0; hidden]; n_layers],
        }
    }
}

impl LstmCore {
    pub fn init(store: &mut ParamStore, input: usize, hidden: usize, n_layers: usize, rng: &mut Rng) -> Self {
        let a = 1.0 / (hidden as f64).sqrt();
        let layers = (0..n_layers)
            .map(|l| {
                let fan_in = if l == 0 { input } else { hidden };
                LstmLayer {
                    w_ih: store.add(
                        format!("lstm{l}.w_ih"),
                        Tensor::uniform(&[fan_in, 4 * hidden], -a, a, rng),
                    ),
                    w_hh: store.add(
                        format!("lstm{l}.w_hh"),
                        Tensor::uniform(&[hidden, 4 * hidden], -a, a, rng),
                    ),
                    b: store.add(format!("lstm{l}.b"), Tensor::zeros(&[4 * hidden])),
                }
            })
            .collect();
        Self { hidden, layers }
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn initial_state(&self) -> LstmState {
        LstmState::zeros(self.layers.len(), self.hidden)
    }

    /// Runs `x[L, input]` step by step; a start flag resets the state
    /// before that step. Returns the top-layer outputs `[L, hidden]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        state: &LstmState,
        starts: &[bool],
    ) -> Result<(Var, LstmState)> {
        let hd = self.hidden;
        let zeros = || Tensor::zeros(&[1, hd]);
        let mut h: Vec<Var> = state
            .h
            .iter()
            .map(|v| g.constant(Tensor::from_parts(vec![1, hd], v.clone())))
            .collect();
        let mut c: Vec<Var> = state
            .c
            .iter()
            .map(|v| g.constant(Tensor::from_parts(vec![1, hd], v.clone())))
            .collect();
        let mut outputs = Vec::with_capacity(starts.len());
        for (t, &start) in starts.iter().enumerate() {
            if start {
                for l in 0..self.layers.len() {
                    h[l] = g.constant(zeros());
                    c[l] = g.constant(zeros());
                }
            }
            let mut input = g.slice_rows(x, t, 1)?;
            for (l, layer) in self.layers.iter().enumerate() {
                let w_ih = g.param(store, layer.w_ih);
                let w_hh = g.param(store, layer.w_hh);
                let b = g.param(store, layer.b);
                let xi = g.matmul(input, w_ih)?;
                let hh = g.matmul(h[l], w_hh)?;
                let gates = g.add(xi, hh)?;
                let gates = g.add_bias(gates, b)?;
                let i = g.slice(gates, 1, 0, hd)?;
                let f = g.slice(gates, 1, hd, hd)?;
                let cc = g.slice(gates, 1, 2 * hd, hd)?;
                let o = g.slice(gates, 1, 3 * hd, hd)?;
                let (i, f, o) = (g.sigmoid(i), g.sigmoid(f), g.sigmoid(o));
                let cc = g.tanh(cc);
                let keep = g.mul(f, c[l])?;
                let write = g.mul(i, cc)?;
                c[l] = g.add(keep, write)?;
                let tc = g.tanh(c[l]);
                h[l] = g.mul(o, tc)?;
                input = h[l];
            }
            outputs.push(input);
        }
        let out = g.concat(&outputs, 0)?;
        let next = LstmState {
            h: h.iter().map(|&v| g.value(v).data().to_vec()).collect(),
            c: c.iter().map(|&v| g.value(v).data().to_vec()).collect(),
        };
        Ok((out, next))
    }
}
