use std::collections::HashMap;

use super::{ParamId, ParamStore, Rng, Tensor};
use crate::error::{contract, Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// An operation whose forward pass is computed by the caller and whose
/// backward pass is supplied here. Used for fused kernels such as the
/// windowed relative attention.
pub trait CustomOp {
    fn name(&self) -> &'static str;

    /// One gradient buffer per input, `None` where the input receives none.
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad_out: &[f64],
    ) -> Result<Vec<Option<Vec<f64>>>>;
}

enum Op {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Sigmoid(Var),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        src: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    Transpose(Var),
    Sum(Var),
    Mean(Var),
    Embedding {
        table: Var,
        indices: Vec<usize>,
    },
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        pad: usize,
    },
    Dropout {
        src: Var,
        mask: Vec<f64>,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Softmax {
        x: Var,
        mask: Option<Var>,
        // exp(x - max) / Z for every entry, including masked-out ones.
        ez: Vec<f64>,
    },
    LogSoftmax(Var),
    Pick {
        src: Var,
        indices: Vec<usize>,
    },
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recording of one forward pass.
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    params: HashMap<ParamId, Var>,
    backward_done: bool,
    track_params: bool,
    train: bool,
    rng: Option<Rng>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

impl Graph {
    /// A graph that records gradients for bound parameters; dropout off.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            params: HashMap::new(),
            backward_done: false,
            track_params: true,
            train: false,
            rng: None,
        }
    }

    /// Forward-only graph: parameters are bound as constants.
    pub fn inference() -> Self {
        Self {
            track_params: false,
            ..Self::new()
        }
    }

    /// Training mode enables dropout, drawing masks from `rng`.
    pub fn training(rng: Rng) -> Self {
        Self {
            train: true,
            rng: Some(rng),
            ..Self::new()
        }
    }

    pub fn is_training(&self) -> bool {
        self.train
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A constant leaf; no gradient is tracked for it.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf whose gradient is tracked (for gradient checks of inputs).
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Binds a parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let track = self.track_params;
        let v = self.push(store.get(id).clone(), Op::Param(id), track);
        self.params.insert(id, v);
        v
    }

    /// Same value, cut from the gradient graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.clone();
        self.constant(t)
    }

    fn zip_op(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(name, ta, tb));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::from_parts(ta.shape().to_vec(), data);
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// `a[..., n] + bias[n]`, broadcast over leading dims.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(bias));
        let n = ta.last_dim();
        if tb.numel() != n {
            return Err(shape_err("add_bias", ta, tb));
        }
        let bd = tb.data();
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bd[i % n])
            .collect();
        let t = Tensor::from_parts(ta.shape().to_vec(), data);
        let rg = self.rg(&[a, bias]);
        Ok(self.push(t, Op::AddBias(a, bias), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let ta = self.value(a);
        let t = Tensor::from_parts(
            ta.shape().to_vec(),
            ta.data().iter().map(|x| x * c).collect(),
        );
        let rg = self.rg(&[a]);
        self.push(t, Op::Scale(a, c), rg)
    }

    fn map_op(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let ta = self.value(a);
        let t = Tensor::from_parts(ta.shape().to_vec(), ta.data().iter().map(|&x| f(x)).collect());
        let rg = self.rg(&[a]);
        self.push(t, op, rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map_op(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map_op(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.map_op(a, f64::ln, Op::Log(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map_op(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map_op(a, sigmoid, Op::Sigmoid(a))
    }

    /// `a[m,k] · b[k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(shape_err("matmul", ta, tb));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let out = matmul_nn(ta.data(), tb.data(), m, k, n);
        let t = Tensor::from_parts(vec![m, n], out);
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::MatMul(a, b), rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.value(parts[0]).clone();
        let rank = first.shape().len();
        if axis >= rank {
            return Err(contract(format!("concat axis {axis} out of range for rank {rank}")));
        }
        let outer: usize = first.shape()[..axis].iter().product();
        let inner: usize = first.shape()[axis + 1..].iter().product();
        let mut axis_total = 0;
        for &p in parts {
            let s = self.value(p).shape();
            if s.len() != rank
                || s[..axis] != first.shape()[..axis]
                || s[axis + 1..] != first.shape()[axis + 1..]
            {
                return Err(shape_err("concat", &first, self.value(p)));
            }
            axis_total += s[axis];
        }
        let mut data = Vec::with_capacity(outer * axis_total * inner);
        for o in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = axis_total;
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    pub fn slice(&mut self, src: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = self.value(src);
        let s = t.shape();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(contract(format!(
                "slice [{start}, {}) on axis {axis} of shape {s:?}",
                start + len
            )));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * s[axis] + start) * inner;
            data.extend_from_slice(&t.data()[base..base + len * inner]);
        }
        let mut shape = s.to_vec();
        shape[axis] = len;
        let rg = self.rg(&[src]);
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::Slice { src, axis, start },
            rg,
        ))
    }

    /// Rows `start..start+len` along axis 0.
    pub fn slice_rows(&mut self, src: Var, start: usize, len: usize) -> Result<Var> {
        self.slice(src, 0, start, len)
    }

    pub fn reshape(&mut self, src: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(src).reshaped(shape)?;
        let rg = self.rg(&[src]);
        Ok(self.push(t, Op::Reshape(src), rg))
    }

    pub fn transpose(&mut self, src: Var) -> Result<Var> {
        let t = self.value(src);
        if t.shape().len() != 2 {
            return Err(contract(format!("transpose needs rank 2, got {:?}", t.shape())));
        }
        let (m, n) = (t.shape()[0], t.shape()[1]);
        let d = t.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = d[i * n + j];
            }
        }
        let rg = self.rg(&[src]);
        Ok(self.push(Tensor::from_parts(vec![n, m], out), Op::Transpose(src), rg))
    }

    pub fn sum(&mut self, src: Var) -> Var {
        let s = self.value(src).data().iter().sum();
        let rg = self.rg(&[src]);
        self.push(Tensor::scalar(s), Op::Sum(src), rg)
    }

    pub fn mean(&mut self, src: Var) -> Var {
        let t = self.value(src);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        let rg = self.rg(&[src]);
        self.push(Tensor::scalar(s), Op::Mean(src), rg)
    }

    /// Row lookup: `table[V, D]` at `indices` gives `[indices.len(), D]`.
    pub fn embedding(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.shape().len() != 2 {
            return Err(contract("embedding table must be rank 2"));
        }
        let (v, d) = (t.shape()[0], t.shape()[1]);
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            if i >= v {
                return Err(contract(format!("embedding index {i} out of range {v}")));
            }
            data.extend_from_slice(t.row(i));
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            Tensor::from_parts(vec![indices.len(), d], data),
            Op::Embedding {
                table,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    /// Stride-1 convolution of `input[N,C,H,W]` with `weight[O,C,K,K]`,
    /// zero padding `pad` on each side.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, pad: usize) -> Result<Var> {
        let (ti, tw, tb) = (self.value(input), self.value(weight), self.value(bias));
        let (is, ws) = (ti.shape(), tw.shape());
        if is.len() != 4 || ws.len() != 4 || is[1] != ws[1] || ws[2] != ws[3] || tb.numel() != ws[0]
        {
            return Err(shape_err("conv2d", ti, tw));
        }
        let geo = ConvGeom::new(is, ws, pad)?;
        let out = geo.forward(ti.data(), tw.data(), tb.data());
        let rg = self.rg(&[input, weight, bias]);
        Ok(self.push(
            Tensor::from_parts(vec![geo.n, geo.o, geo.ho, geo.wo], out),
            Op::Conv2d {
                input,
                weight,
                bias,
                pad,
            },
            rg,
        ))
    }

    /// Inverted dropout; identity outside training mode or when `p == 0`.
    pub fn dropout(&mut self, src: Var, p: f64) -> Var {
        if !self.train || p <= 0.0 {
            return src;
        }
        let n = self.value(src).numel();
        let rng = self.rng.as_mut().expect("training graph carries an rng");
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.bernoulli(p) { 0.0 } else { keep })
            .collect();
        let t = self.value(src);
        let data = t.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let t = Tensor::from_parts(t.shape().to_vec(), data);
        let rg = self.rg(&[src]);
        self.push(t, Op::Dropout { src, mask }, rg)
    }

    /// Normalizes over the last dimension, then applies `gain` and `bias`.
    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let d = tx.last_dim();
        if tg.numel() != d || tb.numel() != d {
            return Err(shape_err("layernorm", tx, tg));
        }
        let rows = tx.rows();
        let (gd, bd) = (tg.data(), tb.data());
        let mut out = vec![0.0; rows * d];
        let mut xhat = vec![0.0; rows * d];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = tx.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = if var + eps > 0.0 { 1.0 / (var + eps).sqrt() } else { 0.0 };
            rstd[r] = rs;
            for j in 0..d {
                let xh = (row[j] - mean) * rs;
                xhat[r * d + j] = xh;
                out[r * d + j] = xh * gd[j] + bd[j];
            }
        }
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            Tensor::from_parts(tx.shape().to_vec(), out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Softmax over the last dimension with optional multiplicative weights:
    /// `out_r = m_r exp(x_r) / sum_q m_q exp(x_q)`.
    ///
    /// Rows listed in `inactive` produce all zeros and are exempt from the
    /// non-empty support requirement.
    pub fn softmax_lastdim(&mut self, x: Var, mask: Option<Var>, inactive: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let d = tx.last_dim();
        let rows = tx.rows();
        let tm = match mask {
            Some(m) => {
                let tm = self.value(m);
                if tm.shape() != tx.shape() {
                    return Err(shape_err("softmax_lastdim", tx, tm));
                }
                if tm.data().iter().any(|&w| !(0.0..=1.0).contains(&w)) {
                    return Err(contract("softmax mask weights must lie in [0, 1]"));
                }
                Some(tm.data())
            }
            None => None,
        };
        let mut out = vec![0.0; rows * d];
        let mut ez = vec![0.0; rows * d];
        for r in 0..rows {
            if inactive.contains(&r) {
                continue;
            }
            let row = tx.row(r);
            let w = |j: usize| tm.map_or(1.0, |m| m[r * d + j]);
            let mut max = f64::NEG_INFINITY;
            for (j, &v) in row.iter().enumerate() {
                if w(j) > 0.0 && v > max {
                    max = v;
                }
            }
            if max == f64::NEG_INFINITY {
                return Err(Error::EmptyAttentionWindow { row: r });
            }
            let mut z = 0.0;
            for (j, &v) in row.iter().enumerate() {
                let e = (v - max).exp();
                ez[r * d + j] = e;
                out[r * d + j] = w(j) * e;
                z += out[r * d + j];
            }
            for j in 0..d {
                out[r * d + j] /= z;
                ez[r * d + j] /= z;
            }
        }
        let mut parents = vec![x];
        parents.extend(mask);
        let rg = self.rg(&parents);
        Ok(self.push(
            Tensor::from_parts(tx.shape().to_vec(), out),
            Op::Softmax { x, mask, ez },
            rg,
        ))
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let d = tx.last_dim();
        let mut out = vec![0.0; tx.numel()];
        for r in 0..tx.rows() {
            let row = tx.row(r);
            let lse = logsumexp(row);
            for j in 0..d {
                out[r * d + j] = row[j] - lse;
            }
        }
        let t = Tensor::from_parts(tx.shape().to_vec(), out);
        let rg = self.rg(&[x]);
        self.push(t, Op::LogSoftmax(x), rg)
    }

    /// `src[L, A]` at `(i, indices[i])` gives `[L]`.
    pub fn pick(&mut self, src: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(src);
        let a = t.last_dim();
        if t.rows() != indices.len() || indices.iter().any(|&i| i >= a) {
            return Err(contract(format!(
                "pick: {} indices for shape {:?}",
                indices.len(),
                t.shape()
            )));
        }
        let data = indices
            .iter()
            .enumerate()
            .map(|(r, &i)| t.data()[r * a + i])
            .collect();
        let rg = self.rg(&[src]);
        Ok(self.push(
            Tensor::from_parts(vec![indices.len()], data),
            Op::Pick {
                src,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    /// Registers the output of a fused kernel.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor, op: Box<dyn CustomOp>) -> Var {
        let rg = self.rg(inputs);
        self.push(
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            rg,
        )
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn reset_grads(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.nodes.iter().enumerate().filter_map(|(i, n)| match n.op {
            Op::Param(id) => self.grads.get(i).and_then(|g| g.as_deref()).map(|g| (id, g)),
            _ => None,
        })
    }

    /// Reverse-mode sweep from a scalar `loss`. Gradients accumulate (`+=`)
    /// into every reachable node that requires grad.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        self.backward_done = true;
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &g)?;
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn acc(&mut self, v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let n = self.nodes[v.0].value.numel();
        let slot = self.grads[v.0].get_or_insert_with(|| vec![0.0; n]);
        f(slot);
    }

    fn acc_vec(&mut self, v: Var, g: &[f64]) {
        self.acc(v, |s| s.iter_mut().zip(g).for_each(|(a, b)| *a += b));
    }

    fn propagate(&mut self, i: usize, g: &[f64]) -> Result<()> {
        // The op is moved out so that grad buffers can be borrowed mutably.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        let res = self.propagate_op(i, &op, g);
        self.nodes[i].op = op;
        res
    }

    fn propagate_op(&mut self, i: usize, op: &Op, g: &[f64]) -> Result<()> {
        match op {
            Op::Leaf | Op::Param(_) => {}
            Op::Add(a, b) => {
                self.acc_vec(*a, g);
                self.acc_vec(*b, g);
            }
            Op::Sub(a, b) => {
                self.acc_vec(*a, g);
                self.acc(*b, |s| s.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).clone(), self.value(*b).clone());
                self.acc(*a, |s| {
                    for ((x, gi), bi) in s.iter_mut().zip(g).zip(vb.data()) {
                        *x += gi * bi;
                    }
                });
                self.acc(*b, |s| {
                    for ((x, gi), ai) in s.iter_mut().zip(g).zip(va.data()) {
                        *x += gi * ai;
                    }
                });
            }
            Op::AddBias(a, bias) => {
                self.acc_vec(*a, g);
                let n = self.value(*bias).numel();
                self.acc(*bias, |s| {
                    for (k, gi) in g.iter().enumerate() {
                        s[k % n] += gi;
                    }
                });
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.acc(*a, |s| s.iter_mut().zip(g).for_each(|(x, y)| *x += c * y));
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a).clone(), self.value(*b).clone());
                let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                if self.requires_grad(*a) {
                    let da = matmul_nt(g, vb.data(), m, n, k);
                    self.acc_vec(*a, &da);
                }
                if self.requires_grad(*b) {
                    let db = matmul_tn(va.data(), g, m, k, n);
                    self.acc_vec(*b, &db);
                }
            }
            Op::Relu(a) => {
                let va = self.value(*a).clone();
                self.acc(*a, |s| {
                    for ((x, gi), v) in s.iter_mut().zip(g).zip(va.data()) {
                        if *v > 0.0 {
                            *x += gi;
                        }
                    }
                });
            }
            Op::Exp(a) => {
                let out = self.nodes[i].value.clone();
                self.acc(*a, |s| {
                    for ((x, gi), y) in s.iter_mut().zip(g).zip(out.data()) {
                        *x += gi * y;
                    }
                });
            }
            Op::Log(a) => {
                let va = self.value(*a).clone();
                self.acc(*a, |s| {
                    for ((x, gi), v) in s.iter_mut().zip(g).zip(va.data()) {
                        *x += gi / v;
                    }
                });
            }
            Op::Tanh(a) => {
                let out = self.nodes[i].value.clone();
                self.acc(*a, |s| {
                    for ((x, gi), y) in s.iter_mut().zip(g).zip(out.data()) {
                        *x += gi * (1.0 - y * y);
                    }
                });
            }
            Op::Sigmoid(a) => {
                let out = self.nodes[i].value.clone();
                self.acc(*a, |s| {
                    for ((x, gi), y) in s.iter_mut().zip(g).zip(out.data()) {
                        *x += gi * y * (1.0 - y);
                    }
                });
            }
            Op::Concat { parts, axis } => {
                let out_shape = self.nodes[i].value.shape().to_vec();
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let total = out_shape[*axis] * inner;
                let mut off = 0;
                for &p in parts {
                    let chunk = self.value(p).shape()[*axis] * inner;
                    self.acc(p, |s| {
                        for o in 0..outer {
                            let src = &g[o * total + off..o * total + off + chunk];
                            for (x, y) in s[o * chunk..(o + 1) * chunk].iter_mut().zip(src) {
                                *x += y;
                            }
                        }
                    });
                    off += chunk;
                }
            }
            Op::Slice { src, axis, start } => {
                let src_shape = self.value(*src).shape().to_vec();
                let len = self.nodes[i].value.shape()[*axis];
                let outer: usize = src_shape[..*axis].iter().product();
                let inner: usize = src_shape[axis + 1..].iter().product();
                let (axis_len, start) = (src_shape[*axis], *start);
                self.acc(*src, |s| {
                    for o in 0..outer {
                        let base = (o * axis_len + start) * inner;
                        let gs = &g[o * len * inner..(o + 1) * len * inner];
                        for (x, y) in s[base..base + len * inner].iter_mut().zip(gs) {
                            *x += y;
                        }
                    }
                });
            }
            Op::Reshape(a) => self.acc_vec(*a, g),
            Op::Transpose(a) => {
                let s = self.value(*a).shape().to_vec();
                let (m, n) = (s[0], s[1]);
                self.acc(*a, |buf| {
                    for r in 0..m {
                        for c in 0..n {
                            buf[r * n + c] += g[c * m + r];
                        }
                    }
                });
            }
            Op::Sum(a) => {
                let g0 = g[0];
                self.acc(*a, |s| s.iter_mut().for_each(|x| *x += g0));
            }
            Op::Mean(a) => {
                let g0 = g[0] / self.value(*a).numel() as f64;
                self.acc(*a, |s| s.iter_mut().for_each(|x| *x += g0));
            }
            Op::Embedding { table, indices } => {
                let d = self.value(*table).shape()[1];
                self.acc(*table, |s| {
                    for (r, &ix) in indices.iter().enumerate() {
                        for j in 0..d {
                            s[ix * d + j] += g[r * d + j];
                        }
                    }
                });
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                pad,
            } => {
                let (ti, tw) = (self.value(*input).clone(), self.value(*weight).clone());
                let geo = ConvGeom::new(ti.shape(), tw.shape(), *pad)?;
                if self.requires_grad(*input) {
                    let d = geo.grad_input(g, tw.data());
                    self.acc_vec(*input, &d);
                }
                if self.requires_grad(*weight) {
                    let d = geo.grad_weight(g, ti.data());
                    self.acc_vec(*weight, &d);
                }
                if self.requires_grad(*bias) {
                    let d = geo.grad_bias(g);
                    self.acc_vec(*bias, &d);
                }
            }
            Op::Dropout { src, mask } => {
                self.acc(*src, |s| {
                    for ((x, gi), m) in s.iter_mut().zip(g).zip(mask) {
                        *x += gi * m;
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let gd = self.value(*gain).data().to_vec();
                let d = gd.len();
                let rows = rstd.len();
                if self.requires_grad(*x) {
                    let mut dx = vec![0.0; rows * d];
                    for r in 0..rows {
                        let (gr, xr) = (&g[r * d..(r + 1) * d], &xhat[r * d..(r + 1) * d]);
                        let dxhat: Vec<f64> = gr.iter().zip(&gd).map(|(a, b)| a * b).collect();
                        let m1 = dxhat.iter().sum::<f64>() / d as f64;
                        let m2 = dxhat.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            dx[r * d + j] = rstd[r] * (dxhat[j] - m1 - xr[j] * m2);
                        }
                    }
                    self.acc_vec(*x, &dx);
                }
                self.acc(*gain, |s| {
                    for (k, (gi, xh)) in g.iter().zip(xhat).enumerate() {
                        s[k % d] += gi * xh;
                    }
                });
                self.acc(*bias, |s| {
                    for (k, gi) in g.iter().enumerate() {
                        s[k % d] += gi;
                    }
                });
            }
            Op::Softmax { x, mask, ez } => {
                let out = self.nodes[i].value.clone();
                let d = out.last_dim();
                let rows = out.rows();
                let a = out.data();
                let mut centered = vec![0.0; rows * d];
                for r in 0..rows {
                    let dot: f64 = (0..d).map(|j| a[r * d + j] * g[r * d + j]).sum();
                    for j in 0..d {
                        centered[r * d + j] = g[r * d + j] - dot;
                    }
                }
                self.acc(*x, |s| {
                    for k in 0..rows * d {
                        s[k] += a[k] * centered[k];
                    }
                });
                if let Some(m) = mask {
                    self.acc(*m, |s| {
                        for k in 0..rows * d {
                            s[k] += ez[k] * centered[k];
                        }
                    });
                }
            }
            Op::LogSoftmax(a) => {
                let out = self.nodes[i].value.clone();
                let d = out.last_dim();
                self.acc(*a, |s| {
                    for r in 0..out.rows() {
                        let gs: f64 = g[r * d..(r + 1) * d].iter().sum();
                        for j in 0..d {
                            s[r * d + j] += g[r * d + j] - out.data()[r * d + j].exp() * gs;
                        }
                    }
                });
            }
            Op::Pick { src, indices } => {
                let a = self.value(*src).last_dim();
                self.acc(*src, |s| {
                    for (r, &ix) in indices.iter().enumerate() {
                        s[r * a + ix] += g[r];
                    }
                });
            }
            Op::Custom { inputs, op } => {
                let ins: Vec<Tensor> = inputs.iter().map(|v| self.value(*v).clone()).collect();
                let refs: Vec<&Tensor> = ins.iter().collect();
                let out = self.nodes[i].value.clone();
                let grads = op.backward(&refs, &out, g)?;
                for (v, gv) in inputs.iter().zip(grads) {
                    if let Some(gv) = gv {
                        self.acc_vec(*v, &gv);
                    }
                }
            }
        }
        Ok(())
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn logsumexp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// `a[m,k] · b[k,n]`.
pub(crate) fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `g[m,n] · b[k,n]ᵀ`.
fn matmul_nt(g: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            out[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `a[m,k]ᵀ · g[m,n]`.
fn matmul_tn(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, gv) in out[p * n..(p + 1) * n].iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
    out
}

struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    k: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn new(is: &[usize], ws: &[usize], pad: usize) -> Result<Self> {
        let (n, c, h, w) = (is[0], is[1], is[2], is[3]);
        let (o, k) = (ws[0], ws[2]);
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(contract(format!("conv2d kernel {k} larger than padded input {h}x{w}")));
        }
        Ok(Self {
            n,
            c,
            h,
            w,
            o,
            k,
            pad,
            ho: h + 2 * pad - k + 1,
            wo: w + 2 * pad - k + 1,
        })
    }

    // Calls f(out_index, in_index, weight_index) for every valid tap.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (c, h, w, k, ho, wo) = (self.c, self.h, self.w, self.k, self.ho, self.wo);
        for b in 0..self.n {
            for oc in 0..self.o {
                for y in 0..ho {
                    for x in 0..wo {
                        let oi = ((b * self.o + oc) * ho + y) * wo + x;
                        for ic in 0..c {
                            for ky in 0..k {
                                let iy = y + ky;
                                if iy < self.pad || iy - self.pad >= h {
                                    continue;
                                }
                                for kx in 0..k {
                                    let ix = x + kx;
                                    if ix < self.pad || ix - self.pad >= w {
                                        continue;
                                    }
                                    let ii = ((b * c + ic) * h + iy - self.pad) * w + ix - self.pad;
                                    let wi = ((oc * c + ic) * k + ky) * k + kx;
                                    f(oi, ii, wi);
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn forward(&self, input: &[f64], weight: &[f64], bias: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n * self.o * self.ho * self.wo];
        let plane = self.ho * self.wo;
        for (idx, v) in out.iter_mut().enumerate() {
            *v = bias[(idx / plane) % self.o];
        }
        self.for_each_tap(|oi, ii, wi| out[oi] += weight[wi] * input[ii]);
        out
    }

    fn grad_input(&self, g: &[f64], weight: &[f64]) -> Vec<f64> {
        let mut d = vec![0.0; self.n * self.c * self.h * self.w];
        self.for_each_tap(|oi, ii, wi| d[ii] += g[oi] * weight[wi]);
        d
    }

    fn grad_weight(&self, g: &[f64], input: &[f64]) -> Vec<f64> {
        let mut d = vec![0.0; self.o * self.c * self.k * self.k];
        self.for_each_tap(|oi, ii, wi| d[wi] += g[oi] * input[ii]);
        d
    }

    fn grad_bias(&self, g: &[f64]) -> Vec<f64> {
        let plane = self.ho * self.wo;
        let mut d = vec![0.0; self.o];
        for (idx, gv) in g.iter().enumerate() {
            d[(idx / plane) % self.o] += gv;
        }
        d
    }
}
