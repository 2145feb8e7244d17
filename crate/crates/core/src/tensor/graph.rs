use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    /// Leaf, or a value computed only from constants.
    Input,
    MatMul(Var, Var),
    BatchMatMul { a: Var, b: Var, transpose_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddTrailing(Var, Var),
    MulTrailing(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Softmax(Var),
    Conv1d { input: Var, kernel: Var, padding: usize },
    MeanTime(Var),
    WeightedTimeSum(Var, Var),
    Concat(Vec<Var>),
    LayerNorm { input: Var, inv_std: Vec<f64> },
    SliceLast { input: Var, start: usize },
    GatherTime { input: Var, index: Vec<usize> },
    /// `act` caches i, f, candidate, o and tanh(c) per row.
    LstmCell { gates: Var, cell: Option<Var>, act: Vec<f64> },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    Mse(Var, Var),
    CrossEntropy { logits: Var, classes: Vec<usize> },
    BceLogits { logits: Var, targets: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only tape of tensor operations.
///
/// Node ids are assigned in creation order, which is a topological order, so
/// the backward pass is a single reverse sweep.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node of a graph.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads[var.0].as_ref()
    }

    /// Gradient of `var`, zeros when nothing flowed into it.
    pub fn wrt(&self, var: Var) -> Tensor {
        self.grads[var.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[var.0]))
    }

    pub(crate) fn take(&mut self, var: Var) -> Tensor {
        self.grads[var.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[var.0]))
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn trailing_matches(x: &Tensor, y: &Tensor) -> bool {
    let (xs, ys) = (x.shape(), y.shape());
    ys.len() <= xs.len() && xs[xs.len() - ys.len()..] == *ys
}

fn expect_rank(op: &'static str, t: &Tensor, rank: usize) -> Result<()> {
    if t.rank() != rank {
        return Err(Error::invalid(format!(
            "{op}: expected rank {rank}, got shape {:?}",
            t.shape()
        )));
    }
    Ok(())
}

/// `tanh` through one `exp`; several times faster than `f64::tanh` and
/// within a few ulps of it away from zero.
fn tanh(x: f64) -> f64 {
    if x.abs() < 1e-2 {
        return x.tanh();
    }
    1.0 - 2.0 / ((2.0 * x).exp() + 1.0)
}

fn sigmoid(x: f64) -> f64 {
    // exp overflow gives 1/inf = 0, which is the correct limit
    1.0 / (1.0 + (-x).exp())
}

/// `out[m,n] += a[m,k] * b[k,n]`
fn gemm(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m,n] += a[m,k] * b[n,k]^T`
fn gemm_bt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `out[k,n] += a[m,k]^T * b[m,n]`
fn gemm_at(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

fn softmax_rows(data: &mut [f64], width: usize) {
    for row in data.chunks_mut(width) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// Tensor that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Input,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Input,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op: if requires_grad { op } else { Op::Input },
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// `[m,k] x [k,n] -> [m,n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 2 || bv.rank() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(Error::shape("matmul", av.shape(), bv.shape()));
        }
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm(av.data(), bv.data(), &mut out, m, k, n);
        self.push("matmul", Tensor::raw(vec![m, n], out), Op::MatMul(a, b), &[a, b])
    }

    /// Batched product `[B,m,k] x [B,k,n]`, or `[B,m,k] x [B,n,k]^T` when
    /// `transpose_b` is set.
    pub fn bmm(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let bad = || Error::shape("bmm", av.shape(), bv.shape());
        if av.rank() != 3 || bv.rank() != 3 || av.shape()[0] != bv.shape()[0] {
            return Err(bad());
        }
        let (batch, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
        let (bk, n) = if transpose_b {
            (bv.shape()[2], bv.shape()[1])
        } else {
            (bv.shape()[1], bv.shape()[2])
        };
        if bk != k {
            return Err(bad());
        }
        let mut out = vec![0.0; batch * m * n];
        for i in 0..batch {
            let a_s = &av.data()[i * m * k..(i + 1) * m * k];
            let b_s = &bv.data()[i * k * n..(i + 1) * k * n];
            let o_s = &mut out[i * m * n..(i + 1) * m * n];
            if transpose_b {
                gemm_bt(a_s, b_s, o_s, m, k, n);
            } else {
                gemm(a_s, b_s, o_s, m, k, n);
            }
        }
        let value = Tensor::raw(vec![batch, m, n], out);
        self.push("bmm", value, Op::BatchMatMul { a, b, transpose_b }, &[a, b])
    }

    fn zip_same(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape(name, av, bv)?;
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| f(*x, *y)).collect();
        let value = Tensor::raw(av.shape().to_vec(), data);
        self.push(name, value, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds `y` broadcast over the leading axes of `x`; `y.shape` must equal
    /// the trailing axes of `x` (e.g. a bias row).
    pub fn add_trailing(&mut self, x: Var, y: Var) -> Result<Var> {
        let (xv, yv) = (self.value(x), self.value(y));
        if !trailing_matches(xv, yv) {
            return Err(Error::shape("add_trailing", xv.shape(), yv.shape()));
        }
        let w = yv.len();
        let mut data = xv.data().to_vec();
        for chunk in data.chunks_mut(w) {
            for (d, b) in chunk.iter_mut().zip(yv.data()) {
                *d += b;
            }
        }
        let value = Tensor::raw(xv.shape().to_vec(), data);
        self.push("add_trailing", value, Op::AddTrailing(x, y), &[x, y])
    }

    /// Multiplies by `y` broadcast over the leading axes of `x`.
    pub fn mul_trailing(&mut self, x: Var, y: Var) -> Result<Var> {
        let (xv, yv) = (self.value(x), self.value(y));
        if !trailing_matches(xv, yv) {
            return Err(Error::shape("mul_trailing", xv.shape(), yv.shape()));
        }
        let w = yv.len();
        let mut data = xv.data().to_vec();
        for chunk in data.chunks_mut(w) {
            for (d, b) in chunk.iter_mut().zip(yv.data()) {
                *d *= b;
            }
        }
        let value = Tensor::raw(xv.shape().to_vec(), data);
        self.push("mul_trailing", value, Op::MulTrailing(x, y), &[x, y])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let xv = self.value(x);
        let value = Tensor::raw(xv.shape().to_vec(), xv.data().iter().map(|v| v * c).collect());
        self.push("scale", value, Op::Scale(x, c), &[x])
    }

    /// Multiplies every element of `x` by the single-element tensor `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        let (xv, sv) = (self.value(x), self.value(s));
        let c = sv
            .item()
            .ok_or_else(|| Error::shape("scale_by", xv.shape(), sv.shape()))?;
        let value = Tensor::raw(xv.shape().to_vec(), xv.data().iter().map(|v| v * c).collect());
        self.push("scale_by", value, Op::ScaleBy(x, s), &[x, s])
    }

    fn map(&mut self, name: &'static str, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let xv = self.value(x);
        let value = Tensor::raw(xv.shape().to_vec(), xv.data().iter().map(|v| f(*v)).collect());
        self.push(name, value, op, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.map("relu", x, |v| v.max(0.0), Op::Relu(x))
    }

    /// Sign of every recorded ReLU input, `true` where strictly positive.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(x) => Some(&self.nodes[x.0].value),
                _ => None,
            })
            .flat_map(|t| t.data().iter().map(|v| *v > 0.0))
            .collect()
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.map("sigmoid", x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.map("tanh", x, tanh, Op::Tanh(x))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let width = xv.last_dim();
        let mut data = xv.data().to_vec();
        softmax_rows(&mut data, width);
        let value = Tensor::raw(xv.shape().to_vec(), data);
        self.push("softmax", value, Op::Softmax(x), &[x])
    }

    /// Stride-1 cross-correlation of `input [B,T,Cin]` with `kernel [K,Cin,Cout]`,
    /// zero-padded by `padding` on both ends of the time axis.
    pub fn conv1d(&mut self, input: Var, kernel: Var, padding: usize) -> Result<Var> {
        let (xv, kv) = (self.value(input), self.value(kernel));
        if xv.rank() != 3 || kv.rank() != 3 || xv.shape()[2] != kv.shape()[1] {
            return Err(Error::shape("conv1d", xv.shape(), kv.shape()));
        }
        let (b, t, cin) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let (k, cout) = (kv.shape()[0], kv.shape()[2]);
        if t + 2 * padding < k {
            return Err(Error::shape("conv1d", xv.shape(), kv.shape()));
        }
        let tout = t + 2 * padding + 1 - k;
        let mut out = vec![0.0; b * tout * cout];
        let (x, w) = (xv.data(), kv.data());
        for bi in 0..b {
            for to in 0..tout {
                let orow = &mut out[(bi * tout + to) * cout..(bi * tout + to + 1) * cout];
                for ki in 0..k {
                    let ti = to + ki;
                    if ti < padding || ti >= t + padding {
                        continue;
                    }
                    let xrow = &x[(bi * t + ti - padding) * cin..(bi * t + ti - padding + 1) * cin];
                    for (ci, xvv) in xrow.iter().enumerate() {
                        let wrow = &w[(ki * cin + ci) * cout..(ki * cin + ci + 1) * cout];
                        for (o, wv) in orow.iter_mut().zip(wrow) {
                            *o += xvv * wv;
                        }
                    }
                }
            }
        }
        let value = Tensor::raw(vec![b, tout, cout], out);
        self.push("conv1d", value, Op::Conv1d { input, kernel, padding }, &[input, kernel])
    }

    /// `[B,T,C] -> [B,C]`, averaging over time.
    pub fn mean_time(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        expect_rank("mean_time", xv, 3)?;
        let (b, t, c) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let mut out = vec![0.0; b * c];
        for bi in 0..b {
            for ti in 0..t {
                for ci in 0..c {
                    out[bi * c + ci] += xv.data()[(bi * t + ti) * c + ci];
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= t as f64);
        self.push("mean_time", Tensor::raw(vec![b, c], out), Op::MeanTime(x), &[x])
    }

    /// `Σ_t w[b,t] · h[b,t,:]` for `h [B,T,C]`, `w [B,T]`.
    pub fn weighted_time_sum(&mut self, h: Var, w: Var) -> Result<Var> {
        let (hv, wv) = (self.value(h), self.value(w));
        if hv.rank() != 3 || wv.shape() != &hv.shape()[..2] {
            return Err(Error::shape("weighted_time_sum", hv.shape(), wv.shape()));
        }
        let (b, t, c) = (hv.shape()[0], hv.shape()[1], hv.shape()[2]);
        let mut out = vec![0.0; b * c];
        for bi in 0..b {
            for ti in 0..t {
                let wt = wv.data()[bi * t + ti];
                for ci in 0..c {
                    out[bi * c + ci] += wt * hv.data()[(bi * t + ti) * c + ci];
                }
            }
        }
        self.push("weighted_time_sum", Tensor::raw(vec![b, c], out), Op::WeightedTimeSum(h, w), &[h, w])
    }

    /// Concatenation along the last axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat: no inputs"))?;
        let lead = self.value(*first).shape()[..self.value(*first).rank() - 1].to_vec();
        let rows: usize = lead.iter().product();
        let mut width = 0;
        for p in parts {
            let pv = self.value(*p);
            if pv.shape()[..pv.rank() - 1] != lead[..] {
                return Err(Error::shape("concat", self.value(*first).shape(), pv.shape()));
            }
            width += pv.last_dim();
        }
        let mut out = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for p in parts {
                let pv = self.value(*p);
                let w = pv.last_dim();
                out.extend_from_slice(&pv.data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(width);
        self.push("concat", Tensor::raw(shape, out), Op::Concat(parts.to_vec()), parts)
    }

    /// Normalizes each row of the last axis to zero mean and unit variance.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let width = xv.last_dim();
        let mut data = xv.data().to_vec();
        let mut inv_std = Vec::with_capacity(data.len() / width.max(1));
        for row in data.chunks_mut(width) {
            let mean = row.iter().sum::<f64>() / width as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / width as f64;
            let inv = 1.0 / (var + eps).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * inv);
            inv_std.push(inv);
        }
        let value = Tensor::raw(xv.shape().to_vec(), data);
        self.push("layer_norm", value, Op::LayerNorm { input: x, inv_std }, &[x])
    }

    /// Columns `start..end` of the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xv = self.value(x);
        let width = xv.last_dim();
        if start >= end || end > width {
            return Err(Error::invalid(format!(
                "slice_last: range {start}..{end} invalid for shape {:?}",
                xv.shape()
            )));
        }
        let out: Vec<f64> = xv
            .data()
            .chunks(width)
            .flat_map(|row| row[start..end].iter().copied())
            .collect();
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = end - start;
        self.push("slice_last", Tensor::raw(shape, out), Op::SliceLast { input: x, start }, &[x])
    }

    /// One LSTM update. `gates [B,4H]` holds the input, forget, candidate and
    /// output pre-activations in that order, `cell [B,H]` the previous cell
    /// state (zero when absent). Returns `[B,2H]`: new hidden state, then new
    /// cell state.
    pub fn lstm_cell(&mut self, gates: Var, cell: Option<Var>) -> Result<Var> {
        let gv = self.value(gates);
        expect_rank("lstm_cell", gv, 2)?;
        let (b, h4) = (gv.shape()[0], gv.shape()[1]);
        if h4 % 4 != 0 || h4 == 0 {
            return Err(Error::invalid(format!("lstm_cell: gate width {h4} is not a positive multiple of 4")));
        }
        let hd = h4 / 4;
        if let Some(c) = cell {
            let cv = self.value(c);
            if cv.shape() != [b, hd] {
                return Err(Error::shape("lstm_cell", gv.shape(), cv.shape()));
            }
        }
        let prev = cell.map(|c| self.value(c).data());
        let mut out = vec![0.0; b * 2 * hd];
        let mut act = vec![0.0; b * 5 * hd];
        for r in 0..b {
            let z = &gv.data()[r * h4..(r + 1) * h4];
            let a = &mut act[r * 5 * hd..(r + 1) * 5 * hd];
            for k in 0..hd {
                let (i, f) = (sigmoid(z[k]), sigmoid(z[hd + k]));
                let (cand, o) = (tanh(z[2 * hd + k]), sigmoid(z[3 * hd + k]));
                let cp = prev.map_or(0.0, |p| p[r * hd + k]);
                let c = f * cp + i * cand;
                let tc = tanh(c);
                out[r * 2 * hd + k] = o * tc;
                out[r * 2 * hd + hd + k] = c;
                for (slot, v) in [i, f, cand, o, tc].into_iter().enumerate() {
                    a[slot * hd + k] = v;
                }
            }
        }
        let inputs: Vec<Var> = std::iter::once(gates).chain(cell).collect();
        self.push("lstm_cell", Tensor::raw(vec![b, 2 * hd], out), Op::LstmCell { gates, cell, act }, &inputs)
    }

    /// Selects time steps `index` from `[B,T,C]`; indices may repeat.
    pub fn gather_time(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        expect_rank("gather_time", xv, 3)?;
        let (b, t, c) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        if let Some(bad) = index.iter().find(|&&i| i >= t) {
            return Err(Error::invalid(format!("gather_time: index {bad} out of range for length {t}")));
        }
        let mut out = Vec::with_capacity(b * index.len() * c);
        for bi in 0..b {
            for &ti in index {
                out.extend_from_slice(&xv.data()[(bi * t + ti) * c..(bi * t + ti + 1) * c]);
            }
        }
        let value = Tensor::raw(vec![b, index.len(), c], out);
        self.push("gather_time", value, Op::GatherTime { input: x, index: index.to_vec() }, &[x])
    }

    /// Time step `t` of `[B,T,C]` as `[B,C]`.
    pub fn time_step(&mut self, x: Var, t: usize) -> Result<Var> {
        let xv = self.value(x);
        expect_rank("time_step", xv, 3)?;
        let (b, len, c) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        if t >= len {
            return Err(Error::invalid(format!("time_step: index {t} out of range for length {len}")));
        }
        let mut out = Vec::with_capacity(b * c);
        for bi in 0..b {
            out.extend_from_slice(&xv.data()[(bi * len + t) * c..(bi * len + t + 1) * c]);
        }
        self.push("time_step", Tensor::raw(vec![b, c], out), Op::GatherTime { input: x, index: vec![t] }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let value = xv.clone().reshaped(shape.to_vec())?;
        self.push("reshape", value, Op::Reshape(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x), &[x])
            .expect("sum of finite values overflowed")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.is_empty() {
            return Err(Error::invalid("mean of empty tensor"));
        }
        let m = xv.data().iter().sum::<f64>() / xv.len() as f64;
        self.push("mean", Tensor::scalar(m), Op::Mean(x), &[x])
    }

    /// Mean of squared differences.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (pv, tv) = (self.value(pred), self.value(target));
        same_shape("mse", pv, tv)?;
        if pv.is_empty() {
            return Err(Error::invalid("mse: empty batch"));
        }
        let m = pv
            .data()
            .iter()
            .zip(tv.data())
            .map(|(p, t)| (p - t).powi(2))
            .sum::<f64>()
            / pv.len() as f64;
        self.push("mse", Tensor::scalar(m), Op::Mse(pred, target), &[pred, target])
    }

    /// Mean over the batch of `-log softmax(logits)[class]`; logits `[B,K]`.
    pub fn cross_entropy(&mut self, logits: Var, classes: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        expect_rank("cross_entropy", lv, 2)?;
        let (b, k) = (lv.shape()[0], lv.shape()[1]);
        if b == 0 {
            return Err(Error::invalid("cross_entropy: empty batch"));
        }
        if classes.len() != b {
            return Err(Error::shape("cross_entropy", lv.shape(), &[classes.len()]));
        }
        if let Some(c) = classes.iter().find(|&&c| c >= k) {
            return Err(Error::invalid(format!("cross_entropy: class {c} out of range for {k} logits")));
        }
        let mut total = 0.0;
        for (row, &c) in lv.data().chunks(k).zip(classes) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[c];
        }
        let op = Op::CrossEntropy { logits, classes: classes.to_vec() };
        self.push("cross_entropy", Tensor::scalar(total / b as f64), op, &[logits])
    }

    /// Mean binary cross-entropy of single-logit rows `[B,1]` against 0/1 targets.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.len() != targets.len() || lv.is_empty() {
            return Err(Error::shape("bce_with_logits", lv.shape(), &[targets.len()]));
        }
        let total: f64 = lv
            .data()
            .iter()
            .zip(targets)
            .map(|(z, y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
            .sum();
        let op = Op::BceLogits { logits, targets: targets.to_vec() };
        self.push("bce_with_logits", Tensor::scalar(total / targets.len() as f64), op, &[logits])
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::invalid(format!(
                "backward: loss must be scalar, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::raw(lv.shape().to_vec(), vec![1.0]));
        }
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], var: Var, delta: Tensor) {
        if !self.nodes[var.0].requires_grad {
            return;
        }
        match &mut grads[var.0] {
            Some(existing) => existing.axpy(1.0, &delta),
            slot @ None => *slot = Some(delta),
        }
    }

    /// Adds into the gradient slot of `var` in place, creating it zeroed.
    fn accumulate_into(&self, grads: &mut [Option<Tensor>], var: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[var.0].requires_grad {
            return;
        }
        let slot = grads[var.0].get_or_insert_with(|| Tensor::zeros(self.nodes[var.0].value.shape()));
        f(slot.data_mut());
    }

    fn propagate(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[id];
        let out = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let like = |v: Var, data: Vec<f64>| Tensor::raw(self.nodes[v.0].value.shape().to_vec(), data);
        match &node.op {
            Op::Input => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if wants(*a) {
                    self.accumulate_into(grads, *a, |ga| gemm_bt(g.data(), bv.data(), ga, m, n, k));
                }
                if wants(*b) {
                    self.accumulate_into(grads, *b, |gb| gemm_at(av.data(), g.data(), gb, m, k, n));
                }
            }
            Op::BatchMatMul { a, b, transpose_b } => {
                let (av, bv) = (val(*a), val(*b));
                let (batch, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
                let n = out.shape()[2];
                let mut ga = vec![0.0; batch * m * k];
                let mut gb = vec![0.0; batch * k * n];
                for i in 0..batch {
                    let a_s = &av.data()[i * m * k..(i + 1) * m * k];
                    let b_s = &bv.data()[i * k * n..(i + 1) * k * n];
                    let g_s = &g.data()[i * m * n..(i + 1) * m * n];
                    let ga_s = &mut ga[i * m * k..(i + 1) * m * k];
                    let gb_s = &mut gb[i * k * n..(i + 1) * k * n];
                    if *transpose_b {
                        // out = a b^T, b stored [n,k]
                        gemm(g_s, b_s, ga_s, m, n, k);
                        gemm_at(g_s, a_s, gb_s, m, n, k);
                    } else {
                        gemm_bt(g_s, b_s, ga_s, m, n, k);
                        gemm_at(a_s, g_s, gb_s, m, k, n);
                    }
                }
                if wants(*a) {
                    self.accumulate(grads, *a, like(*a, ga));
                }
                if wants(*b) {
                    self.accumulate(grads, *b, like(*b, gb));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                let neg = g.data().iter().map(|v| -v).collect();
                self.accumulate(grads, *b, like(*b, neg));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                if wants(*a) {
                    let d = g.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *a, like(*a, d));
                }
                if wants(*b) {
                    let d = g.data().iter().zip(av.data()).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *b, like(*b, d));
                }
            }
            Op::AddTrailing(x, y) => {
                self.accumulate(grads, *x, g.clone());
                if wants(*y) {
                    let w = val(*y).len();
                    let mut gy = vec![0.0; w];
                    for chunk in g.data().chunks(w) {
                        gy.iter_mut().zip(chunk).for_each(|(a, b)| *a += b);
                    }
                    self.accumulate(grads, *y, like(*y, gy));
                }
            }
            Op::MulTrailing(x, y) => {
                let (xv, yv) = (val(*x), val(*y));
                let w = yv.len();
                if wants(*x) {
                    let mut gx = g.data().to_vec();
                    for chunk in gx.chunks_mut(w) {
                        chunk.iter_mut().zip(yv.data()).for_each(|(a, b)| *a *= b);
                    }
                    self.accumulate(grads, *x, like(*x, gx));
                }
                if wants(*y) {
                    let mut gy = vec![0.0; w];
                    for (gc, xc) in g.data().chunks(w).zip(xv.data().chunks(w)) {
                        for i in 0..w {
                            gy[i] += gc[i] * xc[i];
                        }
                    }
                    self.accumulate(grads, *y, like(*y, gy));
                }
            }
            Op::Scale(x, c) => {
                let d = g.data().iter().map(|v| v * c).collect();
                self.accumulate(grads, *x, like(*x, d));
            }
            Op::ScaleBy(x, s) => {
                let (xv, sv) = (val(*x), val(*s));
                let c = sv.data()[0];
                if wants(*x) {
                    let d = g.data().iter().map(|v| v * c).collect();
                    self.accumulate(grads, *x, like(*x, d));
                }
                if wants(*s) {
                    let d: f64 = g.data().iter().zip(xv.data()).map(|(a, b)| a * b).sum();
                    self.accumulate(grads, *s, like(*s, vec![d]));
                }
            }
            Op::Relu(x) => {
                let d = g
                    .data()
                    .iter()
                    .zip(val(*x).data())
                    .map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 })
                    .collect();
                self.accumulate(grads, *x, like(*x, d));
            }
            Op::Sigmoid(x) => {
                let d = g
                    .data()
                    .iter()
                    .zip(out.data())
                    .map(|(gv, y)| gv * y * (1.0 - y))
                    .collect();
                self.accumulate(grads, *x, like(*x, d));
            }
            Op::Tanh(x) => {
                let d = g
                    .data()
                    .iter()
                    .zip(out.data())
                    .map(|(gv, y)| gv * (1.0 - y * y))
                    .collect();
                self.accumulate(grads, *x, like(*x, d));
            }
            Op::Softmax(x) => {
                let w = out.last_dim();
                let mut d = Vec::with_capacity(out.len());
                for (gr, yr) in g.data().chunks(w).zip(out.data().chunks(w)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    d.extend(gr.iter().zip(yr).map(|(gv, y)| y * (gv - dot)));
                }
                self.accumulate(grads, *x, like(*x, d));
            }
            Op::Conv1d { input, kernel, padding } => {
                let (xv, kv) = (val(*input), val(*kernel));
                let (b, t, cin) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                let (k, cout) = (kv.shape()[0], kv.shape()[2]);
                let tout = out.shape()[1];
                let mut gx = vec![0.0; xv.len()];
                let mut gk = vec![0.0; kv.len()];
                for bi in 0..b {
                    for to in 0..tout {
                        let grow = &g.data()[(bi * tout + to) * cout..(bi * tout + to + 1) * cout];
                        for ki in 0..k {
                            let ti = to + ki;
                            if ti < *padding || ti >= t + padding {
                                continue;
                            }
                            let xo = (bi * t + ti - padding) * cin;
                            for ci in 0..cin {
                                let wo = (ki * cin + ci) * cout;
                                let xvv = xv.data()[xo + ci];
                                let mut acc = 0.0;
                                for co in 0..cout {
                                    acc += grow[co] * kv.data()[wo + co];
                                    gk[wo + co] += grow[co] * xvv;
                                }
                                gx[xo + ci] += acc;
                            }
                        }
                    }
                }
                if wants(*input) {
                    self.accumulate(grads, *input, like(*input, gx));
                }
                if wants(*kernel) {
                    self.accumulate(grads, *kernel, like(*kernel, gk));
                }
            }
            Op::MeanTime(x) => {
                let s = val(*x).shape();
                let (b, t, c) = (s[0], s[1], s[2]);
                let mut d = vec![0.0; b * t * c];
                for bi in 0..b {
                    for ti in 0..t {
                        for ci in 0..c {
                            d[(bi * t + ti) * c + ci] = g.data()[bi * c + ci] / t as f64;
                        }
                    }
                }
                self.accumulate(grads, *x, like(*x, d));
            }
            Op::WeightedTimeSum(h, w) => {
                let (hv, wv) = (val(*h), val(*w));
                let (b, t, c) = (hv.shape()[0], hv.shape()[1], hv.shape()[2]);
                let mut gh = vec![0.0; hv.len()];
                let mut gw = vec![0.0; wv.len()];
                for bi in 0..b {
                    for ti in 0..t {
                        let wt = wv.data()[bi * t + ti];
                        let mut acc = 0.0;
                        for ci in 0..c {
                            let gv = g.data()[bi * c + ci];
                            gh[(bi * t + ti) * c + ci] = wt * gv;
                            acc += gv * hv.data()[(bi * t + ti) * c + ci];
                        }
                        gw[bi * t + ti] = acc;
                    }
                }
                if wants(*h) {
                    self.accumulate(grads, *h, like(*h, gh));
                }
                if wants(*w) {
                    self.accumulate(grads, *w, like(*w, gw));
                }
            }
            Op::Concat(parts) => {
                let width = out.last_dim();
                let rows = out.len() / width.max(1);
                let mut offset = 0;
                for p in parts {
                    let w = val(*p).last_dim();
                    if wants(*p) {
                        let mut d = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            d.extend_from_slice(&g.data()[r * width + offset..r * width + offset + w]);
                        }
                        self.accumulate(grads, *p, like(*p, d));
                    }
                    offset += w;
                }
            }
            Op::LayerNorm { input, inv_std } => {
                let w = out.last_dim();
                let mut d = Vec::with_capacity(out.len());
                for ((gr, yr), inv) in g.data().chunks(w).zip(out.data().chunks(w)).zip(inv_std) {
                    let gm = gr.iter().sum::<f64>() / w as f64;
                    let gym = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / w as f64;
                    d.extend(gr.iter().zip(yr).map(|(gv, y)| inv * (gv - gm - y * gym)));
                }
                self.accumulate(grads, *input, like(*input, d));
            }
            Op::SliceLast { input, start } => {
                let w_in = val(*input).last_dim();
                let w_out = out.last_dim();
                self.accumulate_into(grads, *input, |d| {
                    for (r, gr) in g.data().chunks(w_out).enumerate() {
                        let dst = &mut d[r * w_in + start..r * w_in + start + w_out];
                        dst.iter_mut().zip(gr).for_each(|(a, b)| *a += b);
                    }
                });
            }
            Op::LstmCell { gates, cell, act } => {
                let z = val(*gates);
                let h4 = z.last_dim();
                let hd = h4 / 4;
                let b = z.shape()[0];
                let prev = cell.map(|c| val(c).data());
                let mut dz = vec![0.0; b * h4];
                let mut dprev = vec![0.0; b * hd];
                for r in 0..b {
                    let gr = &g.data()[r * 2 * hd..(r + 1) * 2 * hd];
                    let a = &act[r * 5 * hd..(r + 1) * 5 * hd];
                    for k in 0..hd {
                        let (i, f, cand, o, tc) = (a[k], a[hd + k], a[2 * hd + k], a[3 * hd + k], a[4 * hd + k]);
                        let cp = prev.map_or(0.0, |p| p[r * hd + k]);
                        let dh = gr[k];
                        let dc = gr[hd + k] + dh * o * (1.0 - tc * tc);
                        let dzr = &mut dz[r * h4..(r + 1) * h4];
                        dzr[k] = dc * cand * i * (1.0 - i);
                        dzr[hd + k] = dc * cp * f * (1.0 - f);
                        dzr[2 * hd + k] = dc * i * (1.0 - cand * cand);
                        dzr[3 * hd + k] = dh * tc * o * (1.0 - o);
                        dprev[r * hd + k] = dc * f;
                    }
                }
                self.accumulate(grads, *gates, like(*gates, dz));
                if let Some(c) = cell {
                    self.accumulate(grads, *c, like(*c, dprev));
                }
            }
            Op::GatherTime { input, index } => {
                let s = val(*input).shape();
                let (b, t, c) = (s[0], s[1], s[2]);
                self.accumulate_into(grads, *input, |d| {
                    for bi in 0..b {
                        for (oi, &ti) in index.iter().enumerate() {
                            let src = &g.data()[(bi * index.len() + oi) * c..(bi * index.len() + oi + 1) * c];
                            let dst = &mut d[(bi * t + ti) * c..(bi * t + ti + 1) * c];
                            dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
                        }
                    }
                });
            }
            Op::Reshape(x) => {
                self.accumulate(grads, *x, like(*x, g.data().to_vec()));
            }
            Op::Sum(x) => {
                let n = val(*x).len();
                self.accumulate(grads, *x, like(*x, vec![g.data()[0]; n]));
            }
            Op::Mean(x) => {
                let n = val(*x).len();
                self.accumulate(grads, *x, like(*x, vec![g.data()[0] / n as f64; n]));
            }
            Op::Mse(p, t) => {
                let (pv, tv) = (val(*p), val(*t));
                let scale = 2.0 * g.data()[0] / pv.len() as f64;
                let diff: Vec<f64> = pv.data().iter().zip(tv.data()).map(|(a, b)| scale * (a - b)).collect();
                if wants(*t) {
                    self.accumulate(grads, *t, like(*t, diff.iter().map(|v| -v).collect()));
                }
                if wants(*p) {
                    self.accumulate(grads, *p, like(*p, diff));
                }
            }
            Op::CrossEntropy { logits, classes } => {
                let lv = val(*logits);
                let k = lv.last_dim();
                let b = classes.len() as f64;
                let mut d = lv.data().to_vec();
                softmax_rows(&mut d, k);
                for (row, &c) in d.chunks_mut(k).zip(classes) {
                    row[c] -= 1.0;
                    row.iter_mut().for_each(|v| *v *= g.data()[0] / b);
                }
                self.accumulate(grads, *logits, like(*logits, d));
            }
            Op::BceLogits { logits, targets } => {
                let n = targets.len() as f64;
                let d = val(*logits)
                    .data()
                    .iter()
                    .zip(targets)
                    .map(|(z, y)| g.data()[0] * (sigmoid(*z) - y) / n)
                    .collect();
                self.accumulate(grads, *logits, like(*logits, d));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn lstm_cell_matches_scalar_formula() {
        let z = [0.3, -1.2, 0.8, 2.0];
        let cp = 0.7;
        let mut g = Graph::new();
        let gates = g.constant(Tensor::new(vec![1, 4], z.to_vec()).unwrap());
        let cell = g.constant(Tensor::new(vec![1, 1], vec![cp]).unwrap());
        let out = g.lstm_cell(gates, Some(cell)).unwrap();
        let s = |v: f64| 1.0 / (1.0 + (-v).exp());
        let c = s(z[1]) * cp + s(z[0]) * z[2].tanh();
        let h = s(z[3]) * c.tanh();
        assert_relative_eq!(g.value(out).data()[0], h, epsilon = 1e-15);
        assert_relative_eq!(g.value(out).data()[1], c, epsilon = 1e-15);
        assert!(g.lstm_cell(cell, None).is_err());
    }

    #[test]
    fn relu_definition() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![-1.0, 0.0, 2.0]));
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let i = g.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let x = g.constant(Tensor::matrix(2, 1, vec![3.0, 4.0]).unwrap());
        let y = g.matmul(i, x).unwrap();
        assert_eq!(g.value(y).shape(), &[2, 1]);
        assert_eq!(g.value(y).data(), &[3.0, 4.0]);
    }

    #[test]
    fn conv1d_matches_hand_convolution() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![1, 4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let k = g.constant(Tensor::new(vec![2, 1, 1], vec![1.0, 1.0]).unwrap());
        let y = g.conv1d(x, k, 0).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, 5.0, 7.0]);
    }

    #[test]
    fn shape_error_names_op_and_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn relu_sum_gradient() {
        let mut g = Graph::new();
        let w = g.leaf(Tensor::vector(vec![-1.0, 2.0]));
        let r = g.relu(w).unwrap();
        let loss = g.sum(r);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(w).data(), &[0.0, 1.0]);
    }

    #[test]
    fn relu_gradient_at_zero_is_zero() {
        let mut g = Graph::new();
        let w = g.leaf(Tensor::vector(vec![0.0]));
        let r = g.relu(w).unwrap();
        let loss = g.sum(r);
        assert_eq!(g.backward(loss).unwrap().wrt(w).data(), &[0.0]);
    }

    #[test]
    fn squared_product_chain_rule() {
        // (w x)^2 with w = 3, x = 2: d/dw = 2 (w x) x = 24
        let mut g = Graph::new();
        let w = g.leaf(Tensor::scalar(3.0));
        let x = g.constant(Tensor::scalar(2.0));
        let wx = g.mul(w, x).unwrap();
        let sq = g.mul(wx, wx).unwrap();
        let grads = g.backward(sq).unwrap();
        assert_relative_eq!(grads.wrt(w).data()[0], 24.0);
    }

    #[test]
    fn constant_graph_has_zero_gradients() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![1.0, 2.0]));
        let y = g.tanh(x).unwrap();
        let loss = g.sum(y);
        let grads = g.backward(loss).unwrap();
        assert!(grads.wrt(x).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0, 2.0]));
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn losses() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::vector(vec![1.0, 2.0]));
        let b = g.constant(Tensor::vector(vec![1.0, 2.0]));
        let z = g.mse(a, b).unwrap();
        assert_eq!(g.value(z).item(), Some(0.0));
        let p = g.constant(Tensor::vector(vec![0.0]));
        let t = g.constant(Tensor::vector(vec![2.0]));
        let four = g.mse(p, t).unwrap();
        assert_eq!(g.value(four).item(), Some(4.0));
        let logits = g.constant(Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap());
        let ce = g.cross_entropy(logits, &[0]).unwrap();
        assert_relative_eq!(g.value(ce).item().unwrap(), std::f64::consts::LN_2, epsilon = 1e-12);
    }

    #[test]
    fn empty_batch_losses_error() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[0]));
        let b = g.constant(Tensor::zeros(&[0]));
        assert!(g.mse(a, b).is_err());
        let l = g.constant(Tensor::zeros(&[0, 3]));
        assert!(g.cross_entropy(l, &[]).is_err());
    }

    #[test]
    fn out_of_range_class_errors() {
        let mut g = Graph::new();
        let l = g.constant(Tensor::zeros(&[1, 2]));
        assert!(g.cross_entropy(l, &[2]).is_err());
    }

    #[test]
    fn constant_ops_are_not_recorded() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![1.0]));
        let y = g.relu(x).unwrap();
        assert!(!g.requires_grad(y));
        let w = g.leaf(Tensor::vector(vec![1.0]));
        let z = g.add(y, w).unwrap();
        assert!(g.requires_grad(z));
    }
}
