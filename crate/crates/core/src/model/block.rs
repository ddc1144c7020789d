use crate::attention::{attend, xavier, AttentionConfig, AttentionParams, MemoryState};
use crate::error::Result;
use crate::tensor::{Graph, ParamId, ParamStore, Rng, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;

/// Pre-layernorm decoder block:
/// `h = x + Attn(LN(x), memory)`, `y = h + FF(LN(h))`.
#[derive(Clone, Debug)]
pub struct StableBlock {
    pub ln1_gain: ParamId,
    pub ln1_bias: ParamId,
    pub attn: AttentionParams,
    pub ln2_gain: ParamId,
    pub ln2_bias: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    /// Zero at init, together with the attention output projection.
    pub w2: ParamId,
    pub b2: ParamId,
}

impl StableBlock {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        cfg: &AttentionConfig,
        d_ff: usize,
        rng: &mut Rng,
    ) -> Self {
        let d = cfg.d_model;
        let ln1_gain = store.add(format!("{prefix}.ln1.g"), Tensor::full(&[d], 1.0));
        let ln1_bias = store.add(format!("{prefix}.ln1.b"), Tensor::zeros(&[d]));
        let attn = AttentionParams::init(store, &format!("{prefix}.attn"), cfg, rng);
        let ln2_gain = store.add(format!("{prefix}.ln2.g"), Tensor::full(&[d], 1.0));
        let ln2_bias = store.add(format!("{prefix}.ln2.b"), Tensor::zeros(&[d]));
        let w1 = store.add(format!("{prefix}.ff.w1"), xavier(rng, d, d_ff));
        let b1 = store.add(format!("{prefix}.ff.b1"), Tensor::zeros(&[d_ff]));
        let w2 = store.add(format!("{prefix}.ff.w2"), Tensor::zeros(&[d_ff, d]));
        let b2 = store.add(format!("{prefix}.ff.b2"), Tensor::zeros(&[d]));
        Self {
            ln1_gain,
            ln1_bias,
            attn,
            ln2_gain,
            ln2_bias,
            w1,
            b1,
            w2,
            b2,
        }
    }

    /// Forward for one chunk `x[L, d_model]`.
    ///
    /// `memory` is this layer's stored block inputs; only the tail that the
    /// widest head can reach is used. `starts[i]` marks chunk row `i` as the
    /// first step of an episode, hiding everything before it.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        cfg: &AttentionConfig,
        dropout: f64,
        x: Var,
        memory: &MemoryState,
        layer: usize,
        starts: &[bool],
    ) -> Result<Var> {
        let l = g.shape(x)[0];
        let reach = self.attn.windows(store, cfg).into_iter().max().unwrap_or(1);
        let tail = memory.tail(layer, reach);
        let mem_rows = tail.as_ref().map_or(0, |t| t.rows());
        let context = match tail {
            Some(t) => {
                let m = g.constant(t);
                g.concat(&[m, x], 0)?
            }
            None => x,
        };
        let mut bound = 0;
        let lower_bounds: Vec<usize> = starts
            .iter()
            .enumerate()
            .map(|(i, &s)| {
                if s {
                    bound = mem_rows + i;
                }
                bound
            })
            .collect();
        debug_assert_eq!(lower_bounds.len(), l);

        let g1 = g.param(store, self.ln1_gain);
        let b1 = g.param(store, self.ln1_bias);
        let normed = g.layernorm(context, g1, b1, LN_EPS)?;
        let a = attend(g, store, &self.attn, cfg, normed, mem_rows, &lower_bounds)?;
        let a = g.dropout(a, dropout);
        let h = g.add(x, a)?;

        let g2 = g.param(store, self.ln2_gain);
        let b2 = g.param(store, self.ln2_bias);
        let n2 = g.layernorm(h, g2, b2, LN_EPS)?;
        let w1 = g.param(store, self.w1);
        let fb1 = g.param(store, self.b1);
        let hidden = g.matmul(n2, w1)?;
        let hidden = g.add_bias(hidden, fb1)?;
        let hidden = g.relu(hidden);
        let w2 = g.param(store, self.w2);
        let fb2 = g.param(store, self.b2);
        let ff = g.matmul(hidden, w2)?;
        let ff = g.add_bias(ff, fb2)?;
        let ff = g.dropout(ff, dropout);
        g.add(h, ff)
    }
}

/// Memory after a chunk: block inputs since the latest episode start,
/// appended to the old memory when no episode started inside the chunk.
pub fn advance_memory(memory: &mut MemoryState, layer: usize, inputs: &Tensor, starts: &[bool]) {
    let d = inputs.last_dim();
    match starts.iter().rposition(|&s| s) {
        Some(s) => memory.set_layer(layer, inputs.data()[s * d..].to_vec()),
        None => memory.push(layer, inputs.data()),
    }
}
