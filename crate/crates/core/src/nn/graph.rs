//! Recorded computation graph with reverse-mode differentiation.
//!
//! Every forward op appends a node holding its output value and whatever it
//! needs for the backward pass. [`Graph::backward`] walks the nodes in
//! reverse creation order, which is a valid topological order.

use std::collections::HashMap;

use super::params::{ParamId, ParamStore};
use super::tensor::{gemm, softmax_rows_inplace, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

const LN_EPS: f64 = 1e-5;

enum Op {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Relu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        shape: AttnShape,
        probs: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    GatherRows {
        x: Var,
        idx: Vec<Option<usize>>,
    },
    ConcatRows(Vec<Var>),
    Conv1d {
        x: Var,
        kernel: Var,
        bias: Var,
        lengths: Vec<usize>,
        width: usize,
        cols: Vec<f64>,
    },
    SegmentMean {
        x: Var,
        segments: Vec<(usize, usize)>,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
}

#[derive(Debug, Clone, Copy)]
struct AttnShape {
    batch: usize,
    seq: usize,
    heads: usize,
}

enum Slot {
    Owned(Tensor),
    Param(ParamId),
}

struct Node {
    value: Slot,
    op: Op,
    requires_grad: bool,
}

pub struct Graph<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, Var>,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    params: Vec<Option<Tensor>>,
    leaves: HashMap<Var, Tensor>,
}

impl Gradients {
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(id.index()).and_then(Option::as_ref)
    }

    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.leaves.get(&v)
    }

    /// Adds the parameter gradients into the store's gradient buffers.
    /// Parameters the loss does not reach are left untouched.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for (i, g) in self.params.iter().enumerate() {
            if let Some(g) = g {
                store.get_mut(ParamId(i)).gradient.add_assign(g);
            }
        }
    }
}

fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(t) => t.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn acc_data(grads: &mut [Option<Tensor>], v: Var, shape: &[usize], data: Vec<f64>) {
    acc(grads, v, Tensor::new(shape.to_vec(), data).expect("gradient shape"));
}

impl<'s> Graph<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Graph {
            store,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
        }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].value {
            Slot::Owned(t) => t,
            Slot::Param(id) => self.store.value(*id),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Slot::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Differentiable input; its gradient is reported by [`Gradients::wrt`].
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_nodes.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: Slot::Param(id),
            op: Op::Param(id),
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes.insert(id, v);
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape("add", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape("mul", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let ta = self.value(a);
        let out = Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|x| x * c).collect()).expect("same shape");
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, c), rg)
    }

    /// Plain 2-D matrix product `[m, k] x [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(Error::shape("matmul", ta.shape(), tb.shape()));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), false, tb.data(), false, 0.0, &mut out);
        let out = Tensor::new(vec![m, n], out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// `x W + b` over the last axis of `x`; `W` is `[in, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        let (n, din) = tx.dims2();
        if tw.shape().len() != 2 || tw.shape()[0] != din {
            return Err(Error::shape("linear", tx.shape(), tw.shape()));
        }
        let dout = tw.shape()[1];
        let mut out = vec![0.0; n * dout];
        if let Some(b) = b {
            let tb = self.value(b);
            if tb.shape() != [dout] {
                return Err(Error::shape("linear bias", tw.shape(), tb.shape()));
            }
            for row in out.chunks_mut(dout) {
                row.copy_from_slice(tb.data());
            }
        }
        gemm(n, din, dout, tx.data(), false, tw.data(), false, 1.0, &mut out);
        let mut shape = tx.shape().to_vec();
        *shape.last_mut().expect("rank >= 1") = dout;
        let out = Tensor::new(shape, out)?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(out, Op::Linear { x, w, b }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let out = Tensor::new(tx.shape().to_vec(), tx.data().iter().map(|v| v.max(0.0)).collect()).expect("same shape");
        let rg = self.rg(x);
        self.push(out, Op::Relu(x), rg)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let (_, c) = tx.dims2();
        let mut data = tx.data().to_vec();
        softmax_rows_inplace(&mut data, c);
        let out = Tensor::new(tx.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(out, Op::Softmax(x), rg)
    }

    /// Normalizes each row over the last axis, then applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let tx = self.value(x);
        let (n, d) = tx.dims2();
        let (tg, tb) = (self.value(gamma), self.value(beta));
        if tg.shape() != [d] || tb.shape() != [d] {
            return Err(Error::shape("layer_norm", tx.shape(), tg.shape()));
        }
        let mut xhat = vec![0.0; n * d];
        let mut inv_std = vec![0.0; n];
        let mut out = vec![0.0; n * d];
        for r in 0..n {
            let row = &tx.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            inv_std[r] = inv;
            for j in 0..d {
                let h = (row[j] - mean) * inv;
                xhat[r * d + j] = h;
                out[r * d + j] = tg.data()[j] * h + tb.data()[j];
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Multi-head scaled dot-product self-attention.
    ///
    /// `q`, `k`, `v` are `[batch * seq, d_model]` projections; head `h` uses
    /// columns `h * d_head..(h + 1) * d_head`. Keys whose `key_mask` entry
    /// is false get logit `-inf`. Each sequence must keep at least one key.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        key_mask: &[bool],
    ) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let (rows, d) = tq.dims2();
        if rows != batch * seq || tk.shape() != tq.shape() || tv.shape() != tq.shape() {
            return Err(Error::shape("attention", tq.shape(), tk.shape()));
        }
        if heads == 0 || d % heads != 0 || key_mask.len() != rows {
            return Err(Error::shape("attention heads", &[d, heads], &[key_mask.len()]));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; batch * heads * seq * seq];
        let mut out = vec![0.0; rows * d];
        let (qd, kd, vd) = (tq.data(), tk.data(), tv.data());
        for b in 0..batch {
            let mask = &key_mask[b * seq..(b + 1) * seq];
            if !mask.iter().any(|&m| m) {
                return Err(Error::Shape {
                    op: "attention: sequence with every key masked",
                    lhs: vec![b],
                    rhs: vec![seq],
                });
            }
            for h in 0..heads {
                let p = &mut probs[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
                for i in 0..seq {
                    let qi = &qd[(b * seq + i) * d + h * dh..(b * seq + i) * d + (h + 1) * dh];
                    let prow = &mut p[i * seq..(i + 1) * seq];
                    for j in 0..seq {
                        prow[j] = if mask[j] {
                            let kj = &kd[(b * seq + j) * d + h * dh..(b * seq + j) * d + (h + 1) * dh];
                            qi.iter().zip(kj).map(|(a, c)| a * c).sum::<f64>() * scale
                        } else {
                            f64::NEG_INFINITY
                        };
                    }
                    softmax_rows_inplace(prow, seq);
                    let orow = &mut out[(b * seq + i) * d + h * dh..(b * seq + i) * d + (h + 1) * dh];
                    for j in 0..seq {
                        let w = prow[j];
                        if w != 0.0 {
                            let vj = &vd[(b * seq + j) * d + h * dh..(b * seq + j) * d + (h + 1) * dh];
                            for (o, x) in orow.iter_mut().zip(vj) {
                                *o += w * x;
                            }
                        }
                    }
                }
            }
        }
        let out = Tensor::new(tq.shape().to_vec(), out)?;
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                shape: AttnShape { batch, seq, heads },
                probs,
            },
            rg,
        ))
    }

    /// Attention probabilities of an attention node as
    /// `[batch, heads, seq, seq]`.
    pub fn attention_weights(&self, v: Var) -> Option<Tensor> {
        match &self.nodes[v.0].op {
            Op::Attention { shape, probs, .. } => {
                Tensor::new(vec![shape.batch, shape.heads, shape.seq, shape.seq], probs.clone()).ok()
            }
            _ => None,
        }
    }

    /// Rows of `table` (`[n, d]`) selected by `ids`, giving `[ids.len(), d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let (n, d) = tt.dims2();
        if tt.shape().len() != 2 {
            return Err(Error::shape("embedding_lookup", tt.shape(), &[ids.len()]));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= n) {
            return Err(Error::shape("embedding_lookup", tt.shape(), &[bad]));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(tt.row(i));
        }
        let out = Tensor::new(vec![ids.len(), d], out)?;
        let rg = self.rg(table);
        Ok(self.push(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Selects rows of a matrix; `None` yields a zero row.
    pub fn gather_rows(&mut self, x: Var, idx: &[Option<usize>]) -> Result<Var> {
        let tx = self.value(x);
        let (n, d) = tx.dims2();
        if let Some(bad) = idx.iter().flatten().find(|&&i| i >= n) {
            return Err(Error::shape("gather_rows", tx.shape(), &[*bad]));
        }
        let mut out = vec![0.0; idx.len() * d];
        for (r, i) in idx.iter().enumerate() {
            if let Some(i) = i {
                out[r * d..(r + 1) * d].copy_from_slice(tx.row(*i));
            }
        }
        let out = Tensor::new(vec![idx.len(), d], out)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::GatherRows { x, idx: idx.to_vec() }, rg))
    }

    /// Stacks matrices with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let d = parts.first().map_or(0, |&p| self.value(p).dims2().1);
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            let (r, c) = t.dims2();
            if c != d {
                return Err(Error::shape("concat_rows", &[d], t.shape()));
            }
            data.extend_from_slice(t.data());
            rows += r;
        }
        let out = Tensor::new(vec![rows, d], data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// 1-D convolution over time with stride 1 and `width / 2` zero padding
    /// on both sides, so each sequence keeps its length.
    ///
    /// `x` is `[frames, c_in]` holding consecutive sequences of the given
    /// `lengths` (convolution never crosses from one sequence into the next);
    /// `kernel` is `[width, c_in, c_out]`, `bias` is `[c_out]`.
    pub fn conv1d_time(&mut self, x: Var, kernel: Var, bias: Var, lengths: &[usize]) -> Result<Var> {
        let (tx, tk, tb) = (self.value(x), self.value(kernel), self.value(bias));
        let (frames, cin) = tx.dims2();
        if tk.shape().len() != 3 || tk.shape()[1] != cin {
            return Err(Error::shape("conv1d_time", tx.shape(), tk.shape()));
        }
        let (width, cout) = (tk.shape()[0], tk.shape()[2]);
        if tb.shape() != [cout] {
            return Err(Error::shape("conv1d_time bias", tk.shape(), tb.shape()));
        }
        if lengths.iter().sum::<usize>() != frames {
            return Err(Error::shape("conv1d_time lengths", tx.shape(), lengths));
        }
        let cols = im2col(tx.data(), cin, width, lengths);
        let mut out = vec![0.0; frames * cout];
        for row in out.chunks_mut(cout) {
            row.copy_from_slice(tb.data());
        }
        gemm(frames, width * cin, cout, &cols, false, tk.data(), false, 1.0, &mut out);
        let out = Tensor::new(vec![frames, cout], out)?;
        let rg = self.rg(x) || self.rg(kernel) || self.rg(bias);
        Ok(self.push(
            out,
            Op::Conv1d {
                x,
                kernel,
                bias,
                lengths: lengths.to_vec(),
                width,
                cols,
            },
            rg,
        ))
    }

    /// Mean over the rows of each half-open `(start, end)` segment.
    pub fn segment_mean(&mut self, x: Var, segments: &[(usize, usize)]) -> Result<Var> {
        let tx = self.value(x);
        let (n, d) = tx.dims2();
        let mut out = vec![0.0; segments.len() * d];
        for (s, &(start, end)) in segments.iter().enumerate() {
            if start >= end || end > n {
                return Err(Error::shape("segment_mean", tx.shape(), &[start, end]));
            }
            let o = &mut out[s * d..(s + 1) * d];
            for r in start..end {
                for (a, b) in o.iter_mut().zip(tx.row(r)) {
                    *a += b;
                }
            }
            let inv = 1.0 / (end - start) as f64;
            o.iter_mut().for_each(|v| *v *= inv);
        }
        let out = Tensor::new(vec![segments.len(), d], out)?;
        let rg = self.rg(x);
        Ok(self.push(
            out,
            Op::SegmentMean {
                x,
                segments: segments.to_vec(),
            },
            rg,
        ))
    }

    /// Mean over all rows (the time axis), giving `[1, d]`.
    pub fn mean_over_time(&mut self, x: Var) -> Result<Var> {
        let (n, _) = self.value(x).dims2();
        self.segment_mean(x, &[(0, n)])
    }

    /// Inverted dropout with a caller-supplied keep mask.
    pub fn dropout(&mut self, x: Var, keep: &[bool], rate: f64) -> Result<Var> {
        let tx = self.value(x);
        if keep.len() != tx.len() {
            return Err(Error::shape("dropout", tx.shape(), &[keep.len()]));
        }
        let s = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = keep.iter().map(|&k| if k { s } else { 0.0 }).collect();
        let data = tx.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Dropout { x, mask }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits` (`[n, classes]`).
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let tl = self.value(logits);
        let (n, c) = tl.dims2();
        if n != targets.len() || n == 0 {
            return Err(Error::shape("cross_entropy", tl.shape(), &[targets.len()]));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::shape("cross_entropy target", tl.shape(), &[bad]));
        }
        let mut probs = tl.data().to_vec();
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = &tl.data()[r * c..(r + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[t];
        }
        softmax_rows_inplace(&mut probs, c);
        let out = Tensor::scalar(loss / n as f64);
        let rg = self.rg(logits);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Propagates d(loss)/d(node) back to every parameter and leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.len() != 1 || !lt.shape().is_empty() {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        let mut out = Gradients {
            params: vec![None; self.store.len()],
            leaves: HashMap::new(),
        };
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.backward_node(i, node, g, &mut grads, &mut out);
        }
        Ok(out)
    }

    fn backward_node(&self, i: usize, node: &Node, g: Tensor, grads: &mut [Option<Tensor>], out: &mut Gradients) {
        let want = |v: Var| self.nodes[v.0].requires_grad;
        let gd = g.data();
        match &node.op {
            Op::Leaf => {
                out.leaves.insert(Var(i), g);
            }
            Op::Param(id) => match &mut out.params[id.index()] {
                Some(t) => t.add_assign(&g),
                slot @ None => *slot = Some(g),
            },
            Op::Add(a, b) => {
                if want(*b) {
                    acc(grads, *b, g.clone());
                }
                if want(*a) {
                    acc(grads, *a, g);
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if want(*a) {
                    let d = gd.iter().zip(tb.data()).map(|(x, y)| x * y).collect();
                    acc_data(grads, *a, ta.shape(), d);
                }
                if want(*b) {
                    let d = gd.iter().zip(ta.data()).map(|(x, y)| x * y).collect();
                    acc_data(grads, *b, tb.shape(), d);
                }
            }
            Op::Scale(a, c) => {
                let d = gd.iter().map(|x| x * c).collect();
                acc_data(grads, *a, g.shape(), d);
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if want(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, gd, false, tb.data(), true, 0.0, &mut da);
                    acc_data(grads, *a, ta.shape(), da);
                }
                if want(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, ta.data(), true, gd, false, 0.0, &mut db);
                    acc_data(grads, *b, tb.shape(), db);
                }
            }
            Op::Linear { x, w, b } => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let (n, din) = tx.dims2();
                let dout = tw.shape()[1];
                if want(*x) {
                    let mut dx = vec![0.0; n * din];
                    gemm(n, dout, din, gd, false, tw.data(), true, 0.0, &mut dx);
                    acc_data(grads, *x, tx.shape(), dx);
                }
                if want(*w) {
                    let mut dw = vec![0.0; din * dout];
                    gemm(din, n, dout, tx.data(), true, gd, false, 0.0, &mut dw);
                    acc_data(grads, *w, tw.shape(), dw);
                }
                if let Some(b) = b {
                    if want(*b) {
                        let mut db = vec![0.0; dout];
                        for row in gd.chunks(dout) {
                            for (a, v) in db.iter_mut().zip(row) {
                                *a += v;
                            }
                        }
                        acc_data(grads, *b, &[dout], db);
                    }
                }
            }
            Op::Relu(x) => {
                let tx = self.value(*x);
                let d = gd
                    .iter()
                    .zip(tx.data())
                    .map(|(g, v)| if *v > 0.0 { *g } else { 0.0 })
                    .collect();
                acc_data(grads, *x, tx.shape(), d);
            }
            Op::Softmax(x) => {
                let y = self.value(Var(i));
                let (_, c) = y.dims2();
                let mut d = vec![0.0; y.len()];
                for ((dr, yr), gr) in d.chunks_mut(c).zip(y.data().chunks(c)).zip(gd.chunks(c)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                acc_data(grads, *x, y.shape(), d);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let tg = self.value(*gamma);
                let d = tg.len();
                let n = inv_std.len();
                if want(*gamma) || want(*beta) {
                    let mut dg = vec![0.0; d];
                    let mut db = vec![0.0; d];
                    for r in 0..n {
                        for j in 0..d {
                            dg[j] += gd[r * d + j] * xhat[r * d + j];
                            db[j] += gd[r * d + j];
                        }
                    }
                    if want(*gamma) {
                        acc_data(grads, *gamma, &[d], dg);
                    }
                    if want(*beta) {
                        acc_data(grads, *beta, &[d], db);
                    }
                }
                if want(*x) {
                    let mut dx = vec![0.0; n * d];
                    let gam = tg.data();
                    for r in 0..n {
                        let xh = &xhat[r * d..(r + 1) * d];
                        let gr = &gd[r * d..(r + 1) * d];
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..d {
                            let dxh = gr[j] * gam[j];
                            s1 += dxh;
                            s2 += dxh * xh[j];
                        }
                        let k = inv_std[r] / d as f64;
                        for j in 0..d {
                            let dxh = gr[j] * gam[j];
                            dx[r * d + j] = k * (d as f64 * dxh - s1 - xh[j] * s2);
                        }
                    }
                    acc_data(grads, *x, self.value(*x).shape(), dx);
                }
            }
            Op::Attention { q, k, v, shape, probs } => {
                let (tq, tk, tv) = (self.value(*q), self.value(*k), self.value(*v));
                let (rows, d) = tq.dims2();
                let AttnShape { batch, seq, heads } = *shape;
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let (qd, kd, vd) = (tq.data(), tk.data(), tv.data());
                let mut dq = vec![0.0; rows * d];
                let mut dk = vec![0.0; rows * d];
                let mut dv = vec![0.0; rows * d];
                let mut dp = vec![0.0; seq];
                let col = |r: usize, h: usize| r * d + h * dh..r * d + (h + 1) * dh;
                for b in 0..batch {
                    for h in 0..heads {
                        let p = &probs[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
                        for i in 0..seq {
                            let gi = &gd[col(b * seq + i, h)];
                            let prow = &p[i * seq..(i + 1) * seq];
                            // dP = dOut V^T, dV += P^T dOut
                            for j in 0..seq {
                                if prow[j] == 0.0 {
                                    dp[j] = 0.0;
                                    continue;
                                }
                                let vj = &vd[col(b * seq + j, h)];
                                dp[j] = gi.iter().zip(vj).map(|(a, c)| a * c).sum();
                                let w = prow[j];
                                for (o, x) in dv[col(b * seq + j, h)].iter_mut().zip(gi) {
                                    *o += w * x;
                                }
                            }
                            let dot: f64 = prow.iter().zip(&dp).map(|(a, c)| a * c).sum();
                            for j in 0..seq {
                                let ds = prow[j] * (dp[j] - dot) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                let (rq, rk) = (b * seq + i, b * seq + j);
                                for t in 0..dh {
                                    dq[rq * d + h * dh + t] += ds * kd[rk * d + h * dh + t];
                                    dk[rk * d + h * dh + t] += ds * qd[rq * d + h * dh + t];
                                }
                            }
                        }
                    }
                }
                let sh = tq.shape().to_vec();
                if want(*q) {
                    acc_data(grads, *q, &sh, dq);
                }
                if want(*k) {
                    acc_data(grads, *k, &sh, dk);
                }
                if want(*v) {
                    acc_data(grads, *v, &sh, dv);
                }
            }
            Op::Embedding { table, ids } => {
                let tt = self.value(*table);
                let (_, d) = tt.dims2();
                let mut dt = vec![0.0; tt.len()];
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[id * d + j] += gd[r * d + j];
                    }
                }
                acc_data(grads, *table, tt.shape(), dt);
            }
            Op::GatherRows { x, idx } => {
                let tx = self.value(*x);
                let (_, d) = tx.dims2();
                let mut dx = vec![0.0; tx.len()];
                for (r, i) in idx.iter().enumerate() {
                    if let Some(i) = i {
                        for j in 0..d {
                            dx[i * d + j] += gd[r * d + j];
                        }
                    }
                }
                acc_data(grads, *x, tx.shape(), dx);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let t = self.value(p);
                    if want(p) {
                        acc_data(grads, p, t.shape(), gd[off..off + t.len()].to_vec());
                    }
                    off += t.len();
                }
            }
            Op::Conv1d {
                x,
                kernel,
                bias,
                lengths,
                width,
                cols,
            } => {
                let (tx, tk) = (self.value(*x), self.value(*kernel));
                let (frames, cin) = tx.dims2();
                let cout = tk.shape()[2];
                let kc = width * cin;
                if want(*kernel) {
                    let mut dk = vec![0.0; kc * cout];
                    gemm(kc, frames, cout, cols, true, gd, false, 0.0, &mut dk);
                    acc_data(grads, *kernel, tk.shape(), dk);
                }
                if want(*bias) {
                    let mut db = vec![0.0; cout];
                    for row in gd.chunks(cout) {
                        for (a, v) in db.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                    acc_data(grads, *bias, &[cout], db);
                }
                if want(*x) {
                    let mut dcols = vec![0.0; frames * kc];
                    gemm(frames, cout, kc, gd, false, tk.data(), true, 0.0, &mut dcols);
                    let dx = col2im(&dcols, frames, cin, *width, lengths);
                    acc_data(grads, *x, tx.shape(), dx);
                }
            }
            Op::SegmentMean { x, segments } => {
                let tx = self.value(*x);
                let (_, d) = tx.dims2();
                let mut dx = vec![0.0; tx.len()];
                for (s, &(start, end)) in segments.iter().enumerate() {
                    let inv = 1.0 / (end - start) as f64;
                    for r in start..end {
                        for j in 0..d {
                            dx[r * d + j] += gd[s * d + j] * inv;
                        }
                    }
                }
                acc_data(grads, *x, tx.shape(), dx);
            }
            Op::Dropout { x, mask } => {
                let d = gd.iter().zip(mask).map(|(a, m)| a * m).collect();
                acc_data(grads, *x, g.shape(), d);
            }
            Op::Sum(x) => {
                let t = self.value(*x);
                acc_data(grads, *x, t.shape(), vec![gd[0]; t.len()]);
            }
            Op::Mean(x) => {
                let t = self.value(*x);
                acc_data(grads, *x, t.shape(), vec![gd[0] / t.len() as f64; t.len()]);
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let tl = self.value(*logits);
                let (n, c) = tl.dims2();
                let s = gd[0] / n as f64;
                let mut d: Vec<f64> = probs.iter().map(|p| p * s).collect();
                for (r, &t) in targets.iter().enumerate() {
                    d[r * c + t] -= s;
                }
                acc_data(grads, *logits, tl.shape(), d);
            }
        }
    }
}

fn im2col(x: &[f64], cin: usize, width: usize, lengths: &[usize]) -> Vec<f64> {
    let frames: usize = lengths.iter().sum();
    let pad = width / 2;
    let kc = width * cin;
    let mut cols = vec![0.0; frames * kc];
    let mut start = 0;
    for &len in lengths {
        for t in 0..len {
            let row = &mut cols[(start + t) * kc..(start + t + 1) * kc];
            for j in 0..width {
                let src = t as isize + j as isize - pad as isize;
                if src >= 0 && (src as usize) < len {
                    let s = (start + src as usize) * cin;
                    row[j * cin..(j + 1) * cin].copy_from_slice(&x[s..s + cin]);
                }
            }
        }
        start += len;
    }
    cols
}

fn col2im(dcols: &[f64], frames: usize, cin: usize, width: usize, lengths: &[usize]) -> Vec<f64> {
    let pad = width / 2;
    let kc = width * cin;
    let mut dx = vec![0.0; frames * cin];
    let mut start = 0;
    for &len in lengths {
        for t in 0..len {
            let row = &dcols[(start + t) * kc..(start + t + 1) * kc];
            for j in 0..width {
                let src = t as isize + j as isize - pad as isize;
                if src >= 0 && (src as usize) < len {
                    let s = (start + src as usize) * cin;
                    for c in 0..cin {
                        dx[s + c] += row[j * cin + c];
                    }
                }
            }
        }
        start += len;
    }
    dx
}
