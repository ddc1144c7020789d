use serde::{Deserialize, Serialize};

use super::SpanState;

/// Attention compute per chunk under the span cost model.
///
/// Each query of each head costs `3 * d_head` multiply-accumulates per key
/// it evaluates (content score, position score, context sum). Adaptive heads
/// evaluate `min(mem_len, ceil(z) + R)` keys; fixed heads evaluate `mem_len`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopReport {
    /// `windows[layer][head]`.
    pub windows: Vec<Vec<usize>>,
    pub max_span_per_layer: Vec<f64>,
    pub adaptive_flops: u64,
    pub fixed_flops: u64,
    pub ratio: f64,
}

pub fn attention_flops(spans: &[SpanState], chunk_len: usize, mem_len: usize, d_head: usize) -> FlopReport {
    let per_key = 3 * chunk_len as u64 * d_head as u64;
    let windows: Vec<Vec<usize>> = spans
        .iter()
        .map(|s| (0..s.z.len()).map(|h| s.window(h).min(mem_len)).collect())
        .collect();
    let adaptive_flops: u64 = windows.iter().flatten().map(|&w| per_key * w as u64).sum();
    let fixed_flops: u64 = windows.iter().map(|l| per_key * (l.len() * mem_len) as u64).sum();
    FlopReport {
        max_span_per_layer: spans.iter().map(SpanState::max_z).collect(),
        ratio: if fixed_flops == 0 {
            1.0
        } else {
            adaptive_flops as f64 / fixed_flops as f64
        },
        windows,
        adaptive_flops,
        fixed_flops,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layer(z: f64) -> SpanState {
        SpanState {
            z: vec![z; 4],
            ramp: 32,
            max_span: 400,
        }
    }

    #[test]
    fn open_spans_cost_the_same_as_fixed() {
        let r = attention_flops(&[layer(400.0), layer(400.0)], 100, 400, 64);
        assert_eq!(r.adaptive_flops, r.fixed_flops);
        assert_eq!(r.ratio, 1.0);
    }

    #[test]
    fn zero_spans_keep_only_the_ramp() {
        let r = attention_flops(&[layer(0.0)], 100, 400, 64);
        assert_eq!(r.windows, vec![vec![32; 4]]);
        assert_eq!(r.ratio, 32.0 / 400.0);
    }

    #[test]
    fn learned_span_pattern() {
        let r = attention_flops(&[layer(33.0), layer(2.0), layer(2.0)], 100, 400, 64);
        assert_eq!(r.windows, vec![vec![65; 4], vec![34; 4], vec![34; 4]]);
        assert!((r.ratio - 133.0 / 1200.0).abs() < 1e-15);
        assert!((r.ratio - 0.111).abs() < 0.001);
    }

    #[test]
    fn initial_span_fraction() {
        let r = attention_flops(&[layer(120.0)], 100, 400, 64);
        assert_eq!(r.windows[0][0], 152);
        assert!((r.ratio - 0.38).abs() < 1e-15);
    }
}
