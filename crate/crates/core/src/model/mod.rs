//! Agent network: observation encoder, a stack of pre-layernorm
//! TransformerXL blocks (or a stacked LSTM), and linear policy and value
//! heads.

mod block;
mod encoder;
mod lstm;

pub use block::{advance_memory, StableBlock, LN_EPS};
pub use encoder::{Encoder, ObsSpec};
pub use lstm::{lstm_param_count, matched_hidden, LstmConfig, LstmCore, LstmState};

use serde::{Deserialize, Serialize};

use crate::attention::{attention_flops, clamp_spans, AttentionConfig, FlopReport, MemoryState, SpanState, WindowMode};
use crate::error::{contract, Result};
use crate::tensor::{Graph, ParamId, ParamStore, Rng, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// TransformerXL blocks attending over the whole memory.
    Stable,
    /// TransformerXL blocks with a learnable span per head.
    Adaptive,
    Lstm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_head: usize,
    pub d_ff: usize,
    pub dropout: f64,
    pub mem_len: usize,
    pub ramp: usize,
    pub span_init_fraction: f64,
    pub window_mode: WindowMode,
    pub conv_channels: usize,
    pub lstm: LstmConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            kind: ModelKind::Adaptive,
            n_layers: 1,
            d_model: 64,
            n_heads: 2,
            d_head: 32,
            d_ff: 256,
            dropout: 0.0,
            mem_len: 32,
            ramp: 8,
            span_init_fraction: 0.3,
            window_mode: WindowMode::Windowed,
            conv_channels: 8,
            lstm: LstmConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig {
            n_heads: self.n_heads,
            d_head: self.d_head,
            d_model: self.d_model,
            adaptive: self.kind == ModelKind::Adaptive,
            ramp: self.ramp,
            mem_len: self.mem_len,
            span_init_fraction: self.span_init_fraction,
            window_mode: self.window_mode,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 {
            return Err(contract("n_layers must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(contract("dropout must lie in [0, 1)"));
        }
        if self.kind == ModelKind::Lstm {
            if self.lstm.n_layers == 0 {
                return Err(contract("lstm.n_layers must be at least 1"));
            }
            return Ok(());
        }
        self.attention().validate()
    }
}

/// Policy logits and value estimate for one step.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyOutput {
    pub logits: Vec<f64>,
    pub value: f64,
}

/// Whatever the core carries between chunks.
#[derive(Clone, Debug, PartialEq)]
pub enum RecurrentState {
    Memory(MemoryState),
    Lstm(LstmState),
}

#[derive(Clone, Debug)]
enum Core {
    Transformer {
        blocks: Vec<StableBlock>,
        final_gain: ParamId,
        final_bias: ParamId,
    },
    Lstm(LstmCore),
}

/// Graph outputs of a chunk: `logits[L, A]` and `values[L]`.
#[derive(Clone, Copy, Debug)]
pub struct ChunkOutput {
    pub logits: Var,
    pub values: Var,
}

#[derive(Clone, Debug)]
pub struct Agent {
    cfg: ModelConfig,
    n_actions: usize,
    encoder: Encoder,
    core: Core,
    pi_w: ParamId,
    pi_b: ParamId,
    v_w: ParamId,
    v_b: ParamId,
}

/// Parameters of the transformer core alone (blocks and final layernorm).
pub fn transformer_core_params(cfg: &ModelConfig, n_layers: usize) -> usize {
    let mut store = ParamStore::new();
    let attn = cfg.attention();
    let mut rng = Rng::new(0);
    for l in 0..n_layers {
        StableBlock::init(&mut store, &format!("b{l}"), &attn, cfg.d_ff, &mut rng);
    }
    store.num_scalars() + 2 * cfg.d_model
}

impl Agent {
    /// Builds the network and registers its parameters in `store`.
    pub fn init(
        store: &mut ParamStore,
        cfg: &ModelConfig,
        obs: ObsSpec,
        n_actions: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let encoder = Encoder::init(store, obs, d, cfg.conv_channels, rng);
        let (core, head_in) = match cfg.kind {
            ModelKind::Stable | ModelKind::Adaptive => {
                let attn = cfg.attention();
                let blocks = (0..cfg.n_layers)
                    .map(|l| StableBlock::init(store, &format!("block{l}"), &attn, cfg.d_ff, rng))
                    .collect();
                let final_gain = store.add("final_ln.g", Tensor::full(&[d], 1.0));
                let final_bias = store.add("final_ln.b", Tensor::zeros(&[d]));
                (
                    Core::Transformer {
                        blocks,
                        final_gain,
                        final_bias,
                    },
                    d,
                )
            }
            ModelKind::Lstm => {
                let target = transformer_core_params(cfg, cfg.lstm.match_transformer_layers);
                let hidden = match cfg.lstm.hidden {
                    Some(h) => h,
                    None => matched_hidden(d, cfg.lstm.n_layers, target),
                };
                let count = lstm_param_count(d, hidden, cfg.lstm.n_layers);
                if cfg.lstm.hidden.is_none() && count.abs_diff(target) * 10 > target {
                    return Err(contract(format!(
                        "lstm with {count} parameters is not within 10% of the {target}-parameter transformer"
                    )));
                }
                (
                    Core::Lstm(LstmCore::init(store, d, hidden, cfg.lstm.n_layers, rng)),
                    hidden,
                )
            }
        };
        let pi_w = store.add("policy.w", Tensor::zeros(&[head_in, n_actions]));
        let pi_b = store.add("policy.b", Tensor::zeros(&[n_actions]));
        let v_w = store.add("value.w", Tensor::zeros(&[head_in, 1]));
        let v_b = store.add("value.b", Tensor::zeros(&[1]));
        Ok(Self {
            cfg: cfg.clone(),
            n_actions,
            encoder,
            core,
            pi_w,
            pi_b,
            v_w,
            v_b,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn obs_spec(&self) -> ObsSpec {
        self.encoder.spec()
    }

    pub fn blocks(&self) -> &[StableBlock] {
        match &self.core {
            Core::Transformer { blocks, .. } => blocks,
            Core::Lstm(_) => &[],
        }
    }

    pub fn lstm(&self) -> Option<&LstmCore> {
        match &self.core {
            Core::Lstm(core) => Some(core),
            Core::Transformer { .. } => None,
        }
    }

    pub fn initial_state(&self) -> RecurrentState {
        match &self.core {
            Core::Transformer { blocks, .. } => {
                RecurrentState::Memory(MemoryState::new(blocks.len(), self.cfg.d_model, self.cfg.mem_len))
            }
            Core::Lstm(core) => RecurrentState::Lstm(core.initial_state()),
        }
    }

    /// Span parameter ids, one tensor per adaptive layer.
    pub fn span_params(&self) -> Vec<ParamId> {
        self.blocks().iter().filter_map(|b| b.attn.span).collect()
    }

    /// Current spans of every adaptive layer.
    pub fn span_states(&self, store: &ParamStore) -> Vec<SpanState> {
        let attn = self.cfg.attention();
        self.blocks()
            .iter()
            .filter_map(|b| b.attn.span_state(store, &attn))
            .collect()
    }

    pub fn clamp_spans(&self, store: &mut ParamStore) {
        for b in self.blocks() {
            clamp_spans(store, &b.attn);
        }
    }

    /// Cost-model attention FLOPs per chunk of `chunk_len` queries. Layers
    /// without spans count as fully open.
    pub fn flop_report(&self, store: &ParamStore, chunk_len: usize) -> FlopReport {
        let attn = self.cfg.attention();
        let spans: Vec<SpanState> = self
            .blocks()
            .iter()
            .map(|b| {
                b.attn.span_state(store, &attn).unwrap_or(SpanState {
                    z: vec![self.cfg.mem_len as f64; self.cfg.n_heads],
                    ramp: self.cfg.ramp,
                    max_span: self.cfg.mem_len,
                })
            })
            .collect();
        attention_flops(&spans, chunk_len, self.cfg.mem_len, self.cfg.d_head)
    }

    /// Forward over one chunk of `L` observations (flattened back to back).
    /// `starts[i]` marks the first step of a new episode.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        obs: &[f64],
        state: &RecurrentState,
        starts: &[bool],
    ) -> Result<(ChunkOutput, RecurrentState)> {
        let x = self.encoder.forward(g, store, obs)?;
        let l = g.shape(x)[0];
        if starts.len() != l {
            return Err(contract(format!("{} start flags for {l} steps", starts.len())));
        }
        let (features, next) = match (&self.core, state) {
            (
                Core::Transformer {
                    blocks,
                    final_gain,
                    final_bias,
                },
                RecurrentState::Memory(memory),
            ) => {
                let attn = self.cfg.attention();
                let mut next = memory.clone();
                let mut h = x;
                for (layer, block) in blocks.iter().enumerate() {
                    let input = g.value(h).clone();
                    h = block.forward(g, store, &attn, self.cfg.dropout, h, memory, layer, starts)?;
                    advance_memory(&mut next, layer, &input, starts);
                }
                let fg = g.param(store, *final_gain);
                let fb = g.param(store, *final_bias);
                (g.layernorm(h, fg, fb, LN_EPS)?, RecurrentState::Memory(next))
            }
            (Core::Lstm(core), RecurrentState::Lstm(s)) => {
                let (out, next) = core.forward(g, store, x, s, starts)?;
                (out, RecurrentState::Lstm(next))
            }
            _ => return Err(contract("recurrent state does not match the model kind")),
        };
        let pw = g.param(store, self.pi_w);
        let pb = g.param(store, self.pi_b);
        let logits = g.matmul(features, pw)?;
        let logits = g.add_bias(logits, pb)?;
        let vw = g.param(store, self.v_w);
        let vb = g.param(store, self.v_b);
        let values = g.matmul(features, vw)?;
        let values = g.add_bias(values, vb)?;
        let values = g.reshape(values, &[l])?;
        Ok((ChunkOutput { logits, values }, next))
    }

    /// Inference for a single step, as run by actors.
    pub fn step(
        &self,
        store: &ParamStore,
        obs: &[f64],
        state: &RecurrentState,
        start: bool,
    ) -> Result<(PolicyOutput, RecurrentState)> {
        let mut g = Graph::inference();
        let (out, next) = self.forward(&mut g, store, obs, state, &[start])?;
        let logits = g.value(out.logits).data().to_vec();
        let value = g.value(out.values).item();
        if !logits.iter().all(|v| v.is_finite()) || !value.is_finite() {
            return Err(crate::error::Error::NonFinite("policy output".into()));
        }
        Ok((PolicyOutput { logits, value }, next))
    }
}
