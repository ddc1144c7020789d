//! TransformerXL relative attention over a recurrence memory with
//! per-head adaptive spans.
//!
//! Each head owns one learnable span. The stored parameter is the span as a
//! fraction of the maximum span (the memory length), so `z = p * S_max`.
//! Attention weights for query `t` and key `r` are
//! `m_z(t - r) exp(s_tr) / sum_q m_z(t - q) exp(s_tq)` over strictly earlier
//! positions, where `m_z` is the ramp mask of [`mask_weight`]. Only keys at
//! distances `<= min(S_max, ceil(z) + R)` are evaluated; everything beyond
//! has weight exactly zero.

mod flops;
mod kernel;
mod mask;
mod memory;

pub use flops::{attention_flops, FlopReport};
pub use kernel::{mac_count, relative_positions, reset_mac_count, KernelGeometry, RelAttention};
pub use mask::{in_ramp, mask_weight, span_mask, SpanState};
pub use memory::{update_memory, MemoryState};

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::tensor::{Graph, ParamId, ParamStore, Rng, Tensor, Var};

/// How far each head looks back.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WindowMode {
    /// Evaluate only distances that can carry non-zero mask weight.
    #[default]
    Windowed,
    /// Evaluate every distance up to the memory length and rely on the mask.
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub n_heads: usize,
    pub d_head: usize,
    pub d_model: usize,
    pub adaptive: bool,
    /// Ramp length R of the span mask.
    pub ramp: usize,
    /// Memory length; also the maximum span S_max and the lookback cap.
    pub mem_len: usize,
    /// Initial span as a fraction of `mem_len`.
    pub span_init_fraction: f64,
    pub window_mode: WindowMode,
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_heads * self.d_head != self.d_model {
            return Err(contract(format!(
                "n_heads * d_head = {} * {} must equal d_model = {}",
                self.n_heads, self.d_head, self.d_model
            )));
        }
        if !self.d_model.is_multiple_of(2) {
            return Err(contract("d_model must be even for sinusoidal positions"));
        }
        if self.mem_len < 1 {
            return Err(contract("mem_len must be at least 1"));
        }
        if self.adaptive && self.ramp < 2 {
            return Err(contract("ramp length must be at least 2"));
        }
        if !(0.0..=1.0).contains(&self.span_init_fraction) {
            return Err(contract("span_init_fraction must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Parameter ids of one attention sub-layer.
#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wr: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub u: ParamId,
    pub vb: ParamId,
    /// Span fractions `z / S_max`, one per head; adaptive layers only.
    pub span: Option<ParamId>,
}

pub(crate) fn xavier(rng: &mut Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::uniform(&[fan_in, fan_out], -a, a, rng)
}

impl AttentionParams {
    /// Output projection starts at zero so the sub-layer contributes nothing
    /// at initialization.
    pub fn init(store: &mut ParamStore, prefix: &str, cfg: &AttentionConfig, rng: &mut Rng) -> Self {
        let d = cfg.d_model;
        let wq = store.add(format!("{prefix}.wq"), xavier(rng, d, d));
        let wk = store.add(format!("{prefix}.wk"), xavier(rng, d, d));
        let wv = store.add(format!("{prefix}.wv"), xavier(rng, d, d));
        let wr = store.add(format!("{prefix}.wr"), xavier(rng, d, d));
        let wo = store.add(format!("{prefix}.wo"), Tensor::zeros(&[d, d]));
        let bo = store.add(format!("{prefix}.bo"), Tensor::zeros(&[d]));
        let u = store.add(format!("{prefix}.u"), Tensor::zeros(&[d]));
        let vb = store.add(format!("{prefix}.v"), Tensor::zeros(&[d]));
        let span = cfg.adaptive.then(|| {
            store.add(
                format!("{prefix}.span"),
                Tensor::full(&[cfg.n_heads], cfg.span_init_fraction),
            )
        });
        Self {
            wq,
            wk,
            wv,
            wr,
            wo,
            bo,
            u,
            vb,
            span,
        }
    }

    pub fn span_state(&self, store: &ParamStore, cfg: &AttentionConfig) -> Option<SpanState> {
        self.span.map(|id| SpanState {
            z: store
                .get(id)
                .data()
                .iter()
                .map(|p| p * cfg.mem_len as f64)
                .collect(),
            ramp: cfg.ramp,
            max_span: cfg.mem_len,
        })
    }

    /// Lookback per head for the current spans.
    pub fn windows(&self, store: &ParamStore, cfg: &AttentionConfig) -> Vec<usize> {
        match (cfg.window_mode, self.span_state(store, cfg)) {
            (WindowMode::Windowed, Some(s)) => s.windows(),
            _ => vec![cfg.mem_len; cfg.n_heads],
        }
    }
}

/// Multi-head relative attention for a chunk.
///
/// `context` holds the (already normalized) rows `[memory ∥ chunk]`, with
/// `mem_rows` memory rows in front; queries are the last `L` rows.
/// `lower_bounds[i]` is the first context row query `i` may attend to.
/// Returns the output projection of the concatenated heads, `[L, d_model]`.
pub fn attend(
    g: &mut Graph,
    store: &ParamStore,
    p: &AttentionParams,
    cfg: &AttentionConfig,
    context: Var,
    mem_rows: usize,
    lower_bounds: &[usize],
) -> Result<Var> {
    let n = g.shape(context)[0];
    let l = n - mem_rows;
    if lower_bounds.len() != l {
        return Err(contract(format!(
            "{} lower bounds for {l} queries",
            lower_bounds.len()
        )));
    }
    let windows = p.windows(store, cfg);
    let max_w = windows.iter().copied().max().unwrap_or(1).max(1);

    let wq = g.param(store, p.wq);
    let wk = g.param(store, p.wk);
    let wv = g.param(store, p.wv);
    let wr = g.param(store, p.wr);
    let queries = g.slice_rows(context, mem_rows, l)?;
    let q = g.matmul(queries, wq)?;
    let k = g.matmul(context, wk)?;
    let v = g.matmul(context, wv)?;
    let pos = g.constant(relative_positions(max_w, cfg.d_model));
    let r = g.matmul(pos, wr)?;
    let u = g.param(store, p.u);
    let vb = g.param(store, p.vb);

    let mut inputs = vec![q, k, v, r, u, vb];
    if let Some(span) = p.span {
        let frac = g.param(store, span);
        let z = g.scale(frac, cfg.mem_len as f64);
        inputs.push(z);
    }
    let geo = KernelGeometry {
        n_heads: cfg.n_heads,
        d_head: cfg.d_head,
        mem_rows,
        windows,
        lower_bounds: lower_bounds.to_vec(),
        ramp: cfg.ramp as f64,
    };
    let values: Vec<Tensor> = inputs.iter().map(|&x| g.value(x).clone()).collect();
    let refs: Vec<&Tensor> = values.iter().collect();
    let (out, op) = RelAttention::forward(geo, &refs)?;
    let heads = g.custom(&inputs, out, Box::new(op));

    let wo = g.param(store, p.wo);
    let bo = g.param(store, p.bo);
    let proj = g.matmul(heads, wo)?;
    g.add_bias(proj, bo)
}

/// Clamps every span fraction into `[0, 1]`, i.e. `z` into `[0, S_max]`.
pub fn clamp_spans(store: &mut ParamStore, p: &AttentionParams) {
    if let Some(id) = p.span {
        for v in store.get_mut(id).data_mut() {
            *v = v.clamp(0.0, 1.0);
        }
    }
}
