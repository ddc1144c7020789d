//! Single-pass attention over a whole sequence, no chunking and no memory.

pub type Mat = Vec<Vec<f64>>;

/// Parameters of one relative attention sub-layer. Matrices are `[in][out]`.
#[derive(Clone, Debug)]
pub struct RefAttention {
    pub n_heads: usize,
    pub d_head: usize,
    pub wq: Mat,
    pub wk: Mat,
    pub wv: Mat,
    pub wr: Mat,
    pub wo: Mat,
    pub bo: Vec<f64>,
    pub u: Vec<f64>,
    pub vb: Vec<f64>,
    /// Per-head spans in timesteps; `None` means no mask.
    pub z: Option<Vec<f64>>,
    pub ramp: f64,
    /// Positions further back than this are never attended.
    pub max_lookback: usize,
}

#[derive(Clone, Debug)]
pub struct RefBlock {
    pub ln1_gain: Vec<f64>,
    pub ln1_bias: Vec<f64>,
    pub attn: RefAttention,
    pub ln2_gain: Vec<f64>,
    pub ln2_bias: Vec<f64>,
    pub w1: Mat,
    pub b1: Vec<f64>,
    pub w2: Mat,
    pub b2: Vec<f64>,
    pub eps: f64,
}

fn vec_mat(x: &[f64], w: &Mat) -> Vec<f64> {
    let cols = w[0].len();
    let mut out = vec![0.0; cols];
    for (i, xi) in x.iter().enumerate() {
        for j in 0..cols {
            out[j] += xi * w[i][j];
        }
    }
    out
}

fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64], eps: f64) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let denom = (var + eps).sqrt();
    x.iter()
        .enumerate()
        .map(|(i, v)| if denom > 0.0 { (v - mean) / denom } else { 0.0 } * gain[i] + bias[i])
        .collect()
}

fn sinusoid(distance: usize, d_model: usize) -> Vec<f64> {
    let half = d_model / 2;
    let mut e = vec![0.0; d_model];
    for k in 0..half {
        let f = (10000f64).powf(-(2.0 * k as f64) / d_model as f64);
        e[k] = (distance as f64 * f).sin();
        e[half + k] = (distance as f64 * f).cos();
    }
    e
}

fn ramp_mask(z: f64, ramp: f64, distance: f64) -> f64 {
    let m = (ramp + z - distance) / ramp;
    if m < 0.0 {
        0.0
    } else if m > 1.0 {
        1.0
    } else {
        m
    }
}

/// Attention output (after the output projection) for every position of an
/// already-normalized sequence. Position `t` attends to `t-1, t-2, ...`.
pub fn dense_attention_reference(normed: &[Vec<f64>], p: &RefAttention) -> Vec<Vec<f64>> {
    let d_model = p.n_heads * p.d_head;
    let q: Vec<Vec<f64>> = normed.iter().map(|x| vec_mat(x, &p.wq)).collect();
    let k: Vec<Vec<f64>> = normed.iter().map(|x| vec_mat(x, &p.wk)).collect();
    let v: Vec<Vec<f64>> = normed.iter().map(|x| vec_mat(x, &p.wv)).collect();
    let scale = 1.0 / (p.d_head as f64).sqrt();
    let mut outputs = Vec::with_capacity(normed.len());
    for t in 0..normed.len() {
        let mut ctx = vec![0.0; d_model];
        for h in 0..p.n_heads {
            let cols = h * p.d_head..(h + 1) * p.d_head;
            let mut terms = Vec::new();
            for j in 0..t {
                let dist = t - j;
                if dist > p.max_lookback {
                    continue;
                }
                let r = vec_mat(&sinusoid(dist, d_model), &p.wr);
                let mut s = 0.0;
                for c in cols.clone() {
                    s += (q[t][c] + p.u[c]) * k[j][c] + (q[t][c] + p.vb[c]) * r[c];
                }
                let m = match &p.z {
                    Some(z) => ramp_mask(z[h], p.ramp, dist as f64),
                    None => 1.0,
                };
                terms.push((j, s * scale, m));
            }
            let max = terms
                .iter()
                .filter(|x| x.2 > 0.0)
                .map(|x| x.1)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                continue;
            }
            let denom: f64 = terms.iter().map(|&(_, s, m)| m * (s - max).exp()).sum();
            for &(j, s, m) in &terms {
                let a = m * (s - max).exp() / denom;
                for c in cols.clone() {
                    ctx[c] += a * v[j][c];
                }
            }
        }
        let mut out = vec_mat(&ctx, &p.wo);
        for (o, b) in out.iter_mut().zip(&p.bo) {
            *o += b;
        }
        outputs.push(out);
    }
    outputs
}

/// `h = x + Attn(LN(x))`, then `h + FF(LN(h))` with a ReLU feed-forward.
pub fn dense_block_reference(xs: &[Vec<f64>], b: &RefBlock) -> Vec<Vec<f64>> {
    let normed: Vec<Vec<f64>> = xs
        .iter()
        .map(|x| layer_norm(x, &b.ln1_gain, &b.ln1_bias, b.eps))
        .collect();
    let attn = dense_attention_reference(&normed, &b.attn);
    xs.iter()
        .zip(attn)
        .map(|(x, a)| {
            let h: Vec<f64> = x.iter().zip(&a).map(|(p, q)| p + q).collect();
            let n2 = layer_norm(&h, &b.ln2_gain, &b.ln2_bias, b.eps);
            let mut hidden = vec_mat(&n2, &b.w1);
            for (v, bias) in hidden.iter_mut().zip(&b.b1) {
                *v = (*v + bias).max(0.0);
            }
            let ff = vec_mat(&hidden, &b.w2);
            h.iter()
                .zip(ff)
                .zip(&b.b2)
                .map(|((hv, f), bias)| hv + f + bias)
                .collect()
        })
        .collect()
}

pub fn dense_stack_reference(xs: &[Vec<f64>], blocks: &[RefBlock]) -> Vec<Vec<f64>> {
    blocks
        .iter()
        .fold(xs.to_vec(), |h, b| dense_block_reference(&h, b))
}
