//! Fused relative multi-head attention with per-head soft span masks.
//!
//! Keys are the rows of `[memory ∥ chunk]`; query `i` of the chunk sits at
//! concat index `M + i` and attends to strictly earlier rows at distances
//! `1..=window[h]`. Scores follow the TransformerXL decomposition
//! `((q + u)·k + (q + v)·r_d) / sqrt(d_head)`, and the span mask multiplies
//! the exponentiated scores before normalization. Keys outside a head's
//! window are never touched.

use std::cell::Cell;

use super::mask::{in_ramp, mask_weight};
use crate::error::{Error, Result};
use crate::tensor::{CustomOp, Tensor};

thread_local! {
    static MACS: Cell<u64> = const { Cell::new(0) };
}

/// Multiply-accumulates spent on attention scores and context sums on this
/// thread since the last reset.
pub fn mac_count() -> u64 {
    MACS.with(Cell::get)
}

pub fn reset_mac_count() {
    MACS.with(|c| c.set(0));
}

#[derive(Clone, Debug)]
pub struct KernelGeometry {
    pub n_heads: usize,
    pub d_head: usize,
    /// Memory rows present at the front of the key block.
    pub mem_rows: usize,
    /// Maximum distance attended per head.
    pub windows: Vec<usize>,
    /// Earliest key row each query may see (episode boundaries).
    pub lower_bounds: Vec<usize>,
    pub ramp: f64,
}

impl KernelGeometry {
    fn key_range(&self, head: usize, query: usize) -> (usize, usize) {
        let pos = self.mem_rows + query;
        let lo = pos
            .saturating_sub(self.windows[head])
            .max(self.lower_bounds[query]);
        (lo, pos)
    }
}

/// Inputs, by position: q `[L,D]`, k `[N,D]`, v `[N,D]`, r `[P,D]` (row
/// `d-1` encodes distance `d`), u `[D]`, vb `[D]`, and for adaptive heads
/// z `[H]` in timesteps.
pub struct RelAttention {
    geo: KernelGeometry,
    scale: f64,
    // Per (head, query): offset into `weights` and `masks`; key range is
    // recomputed from the geometry.
    offsets: Vec<usize>,
    weights: Vec<f64>,
    masks: Vec<f64>,
    z: Option<Vec<f64>>,
}

impl RelAttention {
    pub fn forward(geo: KernelGeometry, inputs: &[&Tensor]) -> Result<(Tensor, Self)> {
        let (q, k, v, r, u, vb) = (inputs[0], inputs[1], inputs[2], inputs[3], inputs[4], inputs[5]);
        let z = inputs.get(6).map(|t| t.data().to_vec());
        let (h_n, dh) = (geo.n_heads, geo.d_head);
        let d = h_n * dh;
        let l = q.shape()[0];
        let n = k.shape()[0];
        let max_w = geo.windows.iter().copied().max().unwrap_or(0);
        if q.last_dim() != d || k.last_dim() != d || v.shape() != k.shape() || n != geo.mem_rows + l {
            return Err(Error::Shape {
                op: "rel_attention",
                lhs: q.shape().to_vec(),
                rhs: k.shape().to_vec(),
            });
        }
        if r.shape()[0] < max_w.min(n.saturating_sub(1)) {
            return Err(Error::Shape {
                op: "rel_attention positions",
                lhs: r.shape().to_vec(),
                rhs: vec![max_w, d],
            });
        }
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd, rd, ud, vbd) = (q.data(), k.data(), v.data(), r.data(), u.data(), vb.data());

        let mut out = vec![0.0; l * d];
        let mut offsets = Vec::with_capacity(h_n * l);
        let mut weights = Vec::new();
        let mut masks = Vec::new();
        let mut macs = 0u64;
        let mut qu = vec![0.0; dh];
        let mut qv = vec![0.0; dh];
        for h in 0..h_n {
            let c0 = h * dh;
            for i in 0..l {
                offsets.push(weights.len());
                let (lo, pos) = geo.key_range(h, i);
                if lo >= pos {
                    continue;
                }
                let qi = &qd[i * d + c0..i * d + c0 + dh];
                for c in 0..dh {
                    qu[c] = qi[c] + ud[c0 + c];
                    qv[c] = qi[c] + vbd[c0 + c];
                }
                let start = weights.len();
                let mut max = f64::NEG_INFINITY;
                for j in lo..pos {
                    let dist = pos - j;
                    let m = match &z {
                        Some(z) => mask_weight(z[h], geo.ramp, dist as f64),
                        None => 1.0,
                    };
                    let kj = &kd[j * d + c0..j * d + c0 + dh];
                    let rj = &rd[(dist - 1) * d + c0..(dist - 1) * d + c0 + dh];
                    let mut s = 0.0;
                    for c in 0..dh {
                        s += qu[c] * kj[c] + qv[c] * rj[c];
                    }
                    s *= scale;
                    if m > 0.0 && s > max {
                        max = s;
                    }
                    weights.push(s);
                    masks.push(m);
                }
                macs += 3 * (pos - lo) as u64 * dh as u64;
                if max == f64::NEG_INFINITY {
                    return Err(Error::EmptyAttentionWindow { row: i });
                }
                let mut total = 0.0;
                for t in start..weights.len() {
                    let e = if masks[t] > 0.0 {
                        masks[t] * (weights[t] - max).exp()
                    } else {
                        0.0
                    };
                    weights[t] = e;
                    total += e;
                }
                let orow = &mut out[i * d + c0..i * d + c0 + dh];
                for (t, j) in (start..weights.len()).zip(lo..pos) {
                    weights[t] /= total;
                    let a = weights[t];
                    if a == 0.0 {
                        continue;
                    }
                    let vj = &vd[j * d + c0..j * d + c0 + dh];
                    for c in 0..dh {
                        orow[c] += a * vj[c];
                    }
                }
            }
        }
        MACS.with(|cell| cell.set(cell.get() + macs));
        Ok((
            Tensor::from_parts(vec![l, d], out),
            Self {
                geo,
                scale,
                offsets,
                weights,
                masks,
                z,
            },
        ))
    }

    /// Attention weights of one head as a dense `[L, N]` matrix.
    pub fn weights_dense(&self, head: usize) -> Vec<Vec<f64>> {
        let l = self.geo.lower_bounds.len();
        let n = self.geo.mem_rows + l;
        (0..l)
            .map(|i| {
                let mut row = vec![0.0; n];
                let (lo, pos) = self.geo.key_range(head, i);
                let off = self.offsets[head * l + i];
                for (t, j) in (lo..pos).enumerate() {
                    row[j] = self.weights[off + t];
                }
                row
            })
            .collect()
    }
}

impl CustomOp for RelAttention {
    fn name(&self) -> &'static str {
        "rel_attention"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        g: &[f64],
    ) -> Result<Vec<Option<Vec<f64>>>> {
        let (q, k, v, r, u, vb) = (inputs[0], inputs[1], inputs[2], inputs[3], inputs[4], inputs[5]);
        let geo = &self.geo;
        let (h_n, dh) = (geo.n_heads, geo.d_head);
        let d = h_n * dh;
        let l = q.shape()[0];
        let (qd, kd, vd, rd, ud, vbd) = (q.data(), k.data(), v.data(), r.data(), u.data(), vb.data());

        let mut dq = vec![0.0; q.numel()];
        let mut dk = vec![0.0; k.numel()];
        let mut dv = vec![0.0; v.numel()];
        let mut dr = vec![0.0; r.numel()];
        let mut du = vec![0.0; d];
        let mut dvb = vec![0.0; d];
        let mut dz = vec![0.0; h_n];
        let mut gdots = Vec::new();
        for h in 0..h_n {
            let c0 = h * dh;
            for i in 0..l {
                let (lo, pos) = geo.key_range(h, i);
                if lo >= pos {
                    continue;
                }
                let off = self.offsets[h * l + i];
                let gi = &g[i * d + c0..i * d + c0 + dh];
                gdots.clear();
                let mut gbar = 0.0;
                for (t, j) in (lo..pos).enumerate() {
                    let vj = &vd[j * d + c0..j * d + c0 + dh];
                    let gd: f64 = gi.iter().zip(vj).map(|(a, b)| a * b).sum();
                    gbar += self.weights[off + t] * gd;
                    gdots.push(gd);
                }
                for (t, j) in (lo..pos).enumerate() {
                    let a = self.weights[off + t];
                    if a == 0.0 {
                        continue;
                    }
                    let dist = pos - j;
                    let centered = gdots[t] - gbar;
                    for c in 0..dh {
                        dv[j * d + c0 + c] += a * gi[c];
                    }
                    if let Some(z) = &self.z {
                        let m = self.masks[off + t];
                        if in_ramp(z[h], geo.ramp, dist as f64) {
                            dz[h] += a / m * centered / geo.ramp;
                        }
                    }
                    let ds = a * centered * self.scale;
                    let kr = j * d + c0;
                    let rr = (dist - 1) * d + c0;
                    for c in 0..dh {
                        let (kc, rc, qc) = (kd[kr + c], rd[rr + c], qd[i * d + c0 + c]);
                        dq[i * d + c0 + c] += ds * (kc + rc);
                        du[c0 + c] += ds * kc;
                        dvb[c0 + c] += ds * rc;
                        dk[kr + c] += ds * (qc + ud[c0 + c]);
                        dr[rr + c] += ds * (qc + vbd[c0 + c]);
                    }
                }
            }
        }
        let mut grads = vec![Some(dq), Some(dk), Some(dv), Some(dr), Some(du), Some(dvb)];
        if self.z.is_some() {
            grads.push(Some(dz));
        }
        Ok(grads)
    }
}

/// Sinusoidal encodings for distances `1..=max_distance`, `[P, d_model]`,
/// sines in the first half and cosines in the second.
pub fn relative_positions(max_distance: usize, d_model: usize) -> Tensor {
    assert!(max_distance >= 1, "at least one relative position");
    let half = d_model / 2;
    let mut data = vec![0.0; max_distance * d_model];
    for dist in 1..=max_distance {
        let row = &mut data[(dist - 1) * d_model..dist * d_model];
        for kk in 0..half {
            let inv_freq = 1.0 / 10000f64.powf(2.0 * kk as f64 / d_model as f64);
            let angle = dist as f64 * inv_freq;
            row[kk] = angle.sin();
            row[half + kk] = angle.cos();
        }
    }
    Tensor::from_parts(vec![max_distance, d_model], data)
}
