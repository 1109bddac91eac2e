//! Reverse-mode autodiff over a linear tape.
//!
//! Every op computes its value eagerly. In training mode the op and its
//! inputs are recorded so [`Tape::backward`] can replay them in reverse.
//! In inference mode only values are kept and dropout is the identity.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::numcore::tensor::{gemm_acc, gemm_nt_acc, gemm_tn_acc};
use crate::numcore::{ParamId, Parameters, Rng, Tensor};

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    idx: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Training,
    Inference,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(usize, usize),
    Add(usize, usize),
    AddBias(usize, usize),
    Mul(usize, usize),
    Concat(Vec<usize>),
    Tanh(usize),
    Sigmoid(usize),
    Softmax(usize),
    Embedding { table: usize, ids: Vec<usize> },
    Dropout { x: usize, scale: Vec<f64> },
    CrossEntropy { logits: usize, targets: Vec<usize>, weights: Vec<f64>, probs: Vec<f64> },
    Slice { x: usize, start: usize },
    Stack(Vec<usize>),
    Reshape(usize),
    BatchedDot { query: usize, keys: usize },
    WeightedSum { weights: usize, values: usize },
    SelectRows { keep: Vec<bool>, a: usize, b: usize },
    Sum(usize),
    Scale(usize, f64),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Ordered record of executed operations.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    mode: Mode,
    nodes: Vec<Node>,
    bound: HashMap<ParamId, usize>,
}

fn shape_err(op: &'static str, shapes: &[&[usize]]) -> Error {
    Error::Shape { op, shapes: shapes.iter().map(|s| s.to_vec()).collect() }
}

impl Tape {
    pub fn new(mode: Mode) -> Self {
        Tape { id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed), mode, nodes: Vec::new(), bound: HashMap::new() }
    }

    pub fn training() -> Self {
        Self::new(Mode::Training)
    }

    pub fn inference() -> Self {
        Self::new(Mode::Inference)
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn is_training(&self) -> bool {
        self.mode == Mode::Training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Current length, for a later [`Tape::rewind`].
    pub fn mark(&self) -> usize {
        self.nodes.len()
    }

    /// Drops every node recorded after `mark`. Variables created since become invalid.
    pub fn rewind(&mut self, mark: usize) {
        self.nodes.truncate(mark);
        self.bound.retain(|_, idx| *idx < mark);
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.tape, self.id, "variable from another tape");
        &self.nodes[v.idx].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn idx(&self, v: Var) -> usize {
        assert_eq!(v.tape, self.id, "variable from another tape");
        v.idx
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let op = if self.is_training() { op } else { Op::Leaf };
        self.nodes.push(Node { value, op });
        Var { tape: self.id, idx: self.nodes.len() - 1 }
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf });
        Var { tape: self.id, idx: self.nodes.len() - 1 }
    }

    /// Binds a parameter as a leaf. Repeated binds of the same id return the same variable.
    pub fn param(&mut self, params: &Parameters, id: ParamId) -> Var {
        if let Some(&idx) = self.bound.get(&id) {
            return Var { tape: self.id, idx };
        }
        let value = params.get(id).value.clone();
        let op = if self.is_training() { Op::Param(id) } else { Op::Leaf };
        self.nodes.push(Node { value, op });
        let idx = self.nodes.len() - 1;
        self.bound.insert(id, idx);
        Var { tape: self.id, idx }
    }

    /// `a[m,k] · b[k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a), self.idx(b));
        let (av, bv) = (&self.nodes[ai].value, &self.nodes[bi].value);
        let (sa, sb) = (av.shape(), bv.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", &[sa, sb]));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm_acc(av.data(), bv.data(), &mut out, m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul(ai, bi)))
    }

    /// Elementwise sum of equal shapes, or `x[.., n] + bias[n]` broadcast over rows.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a), self.idx(b));
        let (av, bv) = (&self.nodes[ai].value, &self.nodes[bi].value);
        if av.shape() == bv.shape() {
            let data = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
            let value = Tensor::new(av.shape().to_vec(), data)?;
            return Ok(self.push(value, Op::Add(ai, bi)));
        }
        if bv.shape().len() == 1 && bv.numel() == av.last_dim() {
            let n = bv.numel();
            let data = av.data().iter().enumerate().map(|(i, x)| x + bv.data()[i % n]).collect();
            let value = Tensor::new(av.shape().to_vec(), data)?;
            return Ok(self.push(value, Op::AddBias(ai, bi)));
        }
        Err(shape_err("add", &[av.shape(), bv.shape()]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a), self.idx(b));
        let (av, bv) = (&self.nodes[ai].value, &self.nodes[bi].value);
        if av.shape() != bv.shape() {
            return Err(shape_err("mul_elementwise", &[av.shape(), bv.shape()]));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Mul(ai, bi)))
    }

    /// Concatenation along the last axis; leading axes must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument("concat of zero tensors".into()));
        }
        let idxs: Vec<usize> = parts.iter().map(|&v| self.idx(v)).collect();
        let lead = {
            let s = self.nodes[idxs[0]].value.shape();
            s[..s.len() - 1].to_vec()
        };
        for &i in &idxs {
            let s = self.nodes[i].value.shape();
            if s[..s.len() - 1] != lead[..] {
                let shapes: Vec<Vec<usize>> = idxs.iter().map(|&j| self.nodes[j].value.shape().to_vec()).collect();
                return Err(Error::Shape { op: "concat_last_axis", shapes });
            }
        }
        let widths: Vec<usize> = idxs.iter().map(|&i| self.nodes[i].value.last_dim()).collect();
        let total: usize = widths.iter().sum();
        let rows = self.nodes[idxs[0]].value.rows();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &i in &idxs {
                data.extend_from_slice(self.nodes[i].value.row(r));
            }
        }
        let mut shape = lead;
        shape.push(total);
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Concat(idxs)))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let xi = self.idx(x);
        let xv = &self.nodes[xi].value;
        let data = xv.data().iter().map(|v| v.tanh()).collect();
        let value = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Tanh(xi))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let xi = self.idx(x);
        let xv = &self.nodes[xi].value;
        let data = xv.data().iter().map(|&v| sigmoid(v)).collect();
        let value = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Sigmoid(xi))
    }

    /// Softmax over the last axis. Entries with `mask[i] == false` get exactly zero weight.
    pub fn softmax(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let xi = self.idx(x);
        let xv = &self.nodes[xi].value;
        if let Some(m) = mask {
            if m.len() != xv.numel() {
                return Err(shape_err("softmax_last_axis", &[xv.shape(), &[m.len()]]));
            }
        }
        let d = xv.last_dim();
        let mut data = vec![0.0; xv.numel()];
        for r in 0..xv.rows() {
            let row = xv.row(r);
            let live = |j: usize| mask.is_none_or(|m| m[r * d + j]);
            if !(0..d).any(live) {
                return Err(Error::InvalidArgument(format!("softmax row {r} fully masked")));
            }
            softmax_row(row, &live, &mut data[r * d..(r + 1) * d]);
        }
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Softmax(xi)))
    }

    /// Gathers rows of `table[V, E]`, giving `[ids.len(), E]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let ti = self.idx(table);
        let tv = &self.nodes[ti].value;
        if tv.shape().len() != 2 || ids.is_empty() {
            return Err(shape_err("embedding_lookup", &[tv.shape(), &[ids.len()]]));
        }
        let (v, e) = (tv.shape()[0], tv.shape()[1]);
        let mut data = Vec::with_capacity(ids.len() * e);
        for &id in ids {
            if id >= v {
                return Err(Error::OutOfRange { what: "embedding_lookup", index: id, size: v });
            }
            data.extend_from_slice(tv.row(id));
        }
        let value = Tensor::new(vec![ids.len(), e], data)?;
        Ok(self.push(value, Op::Embedding { table: ti, ids: ids.to_vec() }))
    }

    /// Inverted dropout: keeps each entry with probability `keep` and scales survivors by `1/keep`.
    /// Identity in inference mode or when `keep == 1`.
    pub fn dropout(&mut self, x: Var, keep: f64, rng: &mut Rng) -> Result<Var> {
        if !(keep > 0.0 && keep <= 1.0) {
            return Err(Error::InvalidArgument(format!("dropout keep probability {keep} not in (0, 1]")));
        }
        let xi = self.idx(x);
        if !self.is_training() || keep == 1.0 {
            return Ok(x);
        }
        let xv = &self.nodes[xi].value;
        let scale: Vec<f64> =
            (0..xv.numel()).map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 }).collect();
        let data = xv.data().iter().zip(&scale).map(|(a, s)| a * s).collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Dropout { x: xi, scale }))
    }

    /// Mean negative log-likelihood of `targets` under `softmax(logits[N, V])` over entries with
    /// non-zero `mask`. Masked-out entries contribute nothing; an all-zero mask gives loss 0.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[f64]) -> Result<Var> {
        let li = self.idx(logits);
        let lv = &self.nodes[li].value;
        if lv.shape().len() != 2 || targets.len() != lv.shape()[0] || mask.len() != targets.len() {
            return Err(shape_err("cross_entropy_with_mask", &[lv.shape(), &[targets.len()], &[mask.len()]]));
        }
        let v = lv.shape()[1];
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::OutOfRange { what: "cross_entropy_with_mask", index: bad, size: v });
        }
        let count: f64 = mask.iter().sum();
        let norm = if count > 0.0 { 1.0 / count } else { 0.0 };
        let weights: Vec<f64> = mask.iter().map(|m| m * norm).collect();
        let mut probs = vec![0.0; lv.numel()];
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = lv.row(r);
            softmax_row(row, &|_| true, &mut probs[r * v..(r + 1) * v]);
            if weights[r] != 0.0 {
                loss += weights[r] * -log_softmax_at(row, t);
            }
        }
        let op = Op::CrossEntropy { logits: li, targets: targets.to_vec(), weights, probs };
        Ok(self.push(Tensor::scalar(loss), op))
    }

    /// Columns `[start, start + len)` of the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xi = self.idx(x);
        let xv = &self.nodes[xi].value;
        let d = xv.last_dim();
        if len == 0 || start + len > d {
            return Err(shape_err("slice_last_axis", &[xv.shape(), &[start, len]]));
        }
        let mut data = Vec::with_capacity(xv.rows() * len);
        for r in 0..xv.rows() {
            data.extend_from_slice(&xv.row(r)[start..start + len]);
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Slice { x: xi, start }))
    }

    /// Stacks `S` tensors of shape `[B, D]` into `[B, S, D]`.
    pub fn stack(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument("stack of zero tensors".into()));
        }
        let idxs: Vec<usize> = parts.iter().map(|&v| self.idx(v)).collect();
        let s0 = self.nodes[idxs[0]].value.shape().to_vec();
        if s0.len() != 2 || idxs.iter().any(|&i| self.nodes[i].value.shape() != &s0[..]) {
            let shapes = idxs.iter().map(|&i| self.nodes[i].value.shape().to_vec()).collect();
            return Err(Error::Shape { op: "stack", shapes });
        }
        let (b, d, s) = (s0[0], s0[1], idxs.len());
        let mut data = vec![0.0; b * s * d];
        for (t, &i) in idxs.iter().enumerate() {
            let v = &self.nodes[i].value;
            for r in 0..b {
                data[(r * s + t) * d..(r * s + t + 1) * d].copy_from_slice(v.row(r));
            }
        }
        let value = Tensor::new(vec![b, s, d], data)?;
        Ok(self.push(value, Op::Stack(idxs)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let xi = self.idx(x);
        let value = self.nodes[xi].value.clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(xi)))
    }

    /// `out[b, s] = Σ_k query[b, k] · keys[b, s, k]`.
    pub fn batched_dot(&mut self, query: Var, keys: Var) -> Result<Var> {
        let (qi, ki) = (self.idx(query), self.idx(keys));
        let (qv, kv) = (&self.nodes[qi].value, &self.nodes[ki].value);
        let (sq, sk) = (qv.shape(), kv.shape());
        if sq.len() != 2 || sk.len() != 3 || sq[0] != sk[0] || sq[1] != sk[2] {
            return Err(shape_err("batched_dot", &[sq, sk]));
        }
        let (b, s, k) = (sk[0], sk[1], sk[2]);
        let mut data = vec![0.0; b * s];
        for r in 0..b {
            let q = qv.row(r);
            for t in 0..s {
                let key = &kv.data()[(r * s + t) * k..(r * s + t + 1) * k];
                data[r * s + t] = q.iter().zip(key).map(|(x, y)| x * y).sum();
            }
        }
        let value = Tensor::new(vec![b, s], data)?;
        Ok(self.push(value, Op::BatchedDot { query: qi, keys: ki }))
    }

    /// `out[b, :] = Σ_s weights[b, s] · values[b, s, :]`.
    pub fn weighted_sum(&mut self, weights: Var, values: Var) -> Result<Var> {
        let (wi, vi) = (self.idx(weights), self.idx(values));
        let (wv, vv) = (&self.nodes[wi].value, &self.nodes[vi].value);
        let (sw, sv) = (wv.shape(), vv.shape());
        if sw.len() != 2 || sv.len() != 3 || sw[0] != sv[0] || sw[1] != sv[1] {
            return Err(shape_err("weighted_sum", &[sw, sv]));
        }
        let (b, s, d) = (sv[0], sv[1], sv[2]);
        let mut data = vec![0.0; b * d];
        for r in 0..b {
            let out = &mut data[r * d..(r + 1) * d];
            for t in 0..s {
                let w = wv.data()[r * s + t];
                let val = &vv.data()[(r * s + t) * d..(r * s + t + 1) * d];
                for (o, x) in out.iter_mut().zip(val) {
                    *o += w * x;
                }
            }
        }
        let value = Tensor::new(vec![b, d], data)?;
        Ok(self.push(value, Op::WeightedSum { weights: wi, values: vi }))
    }

    /// Row `r` of the result is row `r` of `a` when `keep[r]`, else row `r` of `b`.
    pub fn select_rows(&mut self, keep: &[bool], a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a), self.idx(b));
        let (av, bv) = (&self.nodes[ai].value, &self.nodes[bi].value);
        if av.shape() != bv.shape() || av.rows() != keep.len() {
            return Err(shape_err("select_rows", &[av.shape(), bv.shape(), &[keep.len()]]));
        }
        let mut data = Vec::with_capacity(av.numel());
        for (r, &k) in keep.iter().enumerate() {
            data.extend_from_slice(if k { av.row(r) } else { bv.row(r) });
        }
        let value = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(value, Op::SelectRows { keep: keep.to_vec(), a: ai, b: bi }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let xi = self.idx(x);
        let total = self.nodes[xi].value.data().iter().sum();
        self.push(Tensor::scalar(total), Op::Sum(xi))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let xi = self.idx(x);
        let xv = &self.nodes[xi].value;
        let data = xv.data().iter().map(|v| v * factor).collect();
        let value = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Scale(xi, factor))
    }

    /// Accumulates `∂loss/∂p` into `params` for every parameter bound on this tape.
    pub fn backward(&self, loss: Var, params: &mut Parameters) -> Result<()> {
        if loss.tape != self.id || loss.idx >= self.nodes.len() {
            return Err(Error::NotOnTape);
        }
        let lv = &self.nodes[loss.idx].value;
        if lv.numel() != 1 {
            return Err(Error::NotScalar(lv.shape().to_vec()));
        }
        if !self.is_training() {
            return Err(Error::InvalidArgument("backward on an inference-mode tape".into()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.idx).map(|_| None).collect();
        grads[loss.idx] = Some(Tensor::full(lv.shape(), 1.0));

        for i in (0..=loss.idx).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => params.accumulate(*id, &g),
                Op::MatMul(a, b) => {
                    let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                    // dA = G · Bᵀ, dB = Aᵀ · G
                    let ga = acc(&mut grads, *a, av);
                    gemm_nt_acc(g.data(), bv.data(), ga, m, n, k);
                    let gb = acc(&mut grads, *b, bv);
                    gemm_tn_acc(av.data(), g.data(), gb, m, k, n);
                }
                Op::Add(a, b) => {
                    add_into(acc(&mut grads, *a, &self.nodes[*a].value), g.data());
                    add_into(acc(&mut grads, *b, &self.nodes[*b].value), g.data());
                }
                Op::AddBias(a, b) => {
                    add_into(acc(&mut grads, *a, &self.nodes[*a].value), g.data());
                    let gb = acc(&mut grads, *b, &self.nodes[*b].value);
                    let n = gb.len();
                    for (j, gv) in g.data().iter().enumerate() {
                        gb[j % n] += gv;
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    let ga = acc(&mut grads, *a, av);
                    for ((o, gv), y) in ga.iter_mut().zip(g.data()).zip(bv.data()) {
                        *o += gv * y;
                    }
                    let gb = acc(&mut grads, *b, bv);
                    for ((o, gv), x) in gb.iter_mut().zip(g.data()).zip(av.data()) {
                        *o += gv * x;
                    }
                }
                Op::Concat(parts) => {
                    let total = node.value.last_dim();
                    let mut offset = 0;
                    for &p in parts {
                        let pv = &self.nodes[p].value;
                        let w = pv.last_dim();
                        let gp = acc(&mut grads, p, pv);
                        for r in 0..pv.rows() {
                            let src = &g.data()[r * total + offset..r * total + offset + w];
                            add_into(&mut gp[r * w..(r + 1) * w], src);
                        }
                        offset += w;
                    }
                }
                Op::Tanh(x) => {
                    let gx = acc(&mut grads, *x, &self.nodes[*x].value);
                    for ((o, gv), y) in gx.iter_mut().zip(g.data()).zip(node.value.data()) {
                        *o += gv * (1.0 - y * y);
                    }
                }
                Op::Sigmoid(x) => {
                    let gx = acc(&mut grads, *x, &self.nodes[*x].value);
                    for ((o, gv), y) in gx.iter_mut().zip(g.data()).zip(node.value.data()) {
                        *o += gv * y * (1.0 - y);
                    }
                }
                Op::Softmax(x) => {
                    let d = node.value.last_dim();
                    let gx = acc(&mut grads, *x, &self.nodes[*x].value);
                    for r in 0..node.value.rows() {
                        let y = node.value.row(r);
                        let gr = &g.data()[r * d..(r + 1) * d];
                        let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            gx[r * d + j] += y[j] * (gr[j] - dot);
                        }
                    }
                }
                Op::Embedding { table, ids } => {
                    let tv = &self.nodes[*table].value;
                    let e = tv.shape()[1];
                    let gt = acc(&mut grads, *table, tv);
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut gt[id * e..(id + 1) * e], &g.data()[r * e..(r + 1) * e]);
                    }
                }
                Op::Dropout { x, scale } => {
                    let gx = acc(&mut grads, *x, &self.nodes[*x].value);
                    for ((o, gv), s) in gx.iter_mut().zip(g.data()).zip(scale) {
                        *o += gv * s;
                    }
                }
                Op::CrossEntropy { logits, targets, weights, probs } => {
                    let lv = &self.nodes[*logits].value;
                    let v = lv.shape()[1];
                    let upstream = g.item();
                    let gl = acc(&mut grads, *logits, lv);
                    for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                        if w == 0.0 {
                            continue;
                        }
                        let row = &mut gl[r * v..(r + 1) * v];
                        for (j, o) in row.iter_mut().enumerate() {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            *o += upstream * w * (probs[r * v + j] - onehot);
                        }
                    }
                }
                Op::Slice { x, start } => {
                    let xv = &self.nodes[*x].value;
                    let (d, w) = (xv.last_dim(), node.value.last_dim());
                    let gx = acc(&mut grads, *x, xv);
                    for r in 0..xv.rows() {
                        add_into(&mut gx[r * d + start..r * d + start + w], &g.data()[r * w..(r + 1) * w]);
                    }
                }
                Op::Stack(parts) => {
                    let (b, s, d) = (node.value.shape()[0], node.value.shape()[1], node.value.shape()[2]);
                    for (t, &p) in parts.iter().enumerate() {
                        let gp = acc(&mut grads, p, &self.nodes[p].value);
                        for r in 0..b {
                            add_into(&mut gp[r * d..(r + 1) * d], &g.data()[(r * s + t) * d..(r * s + t + 1) * d]);
                        }
                    }
                }
                Op::Reshape(x) => {
                    add_into(acc(&mut grads, *x, &self.nodes[*x].value), g.data());
                }
                Op::BatchedDot { query, keys } => {
                    let (qv, kv) = (&self.nodes[*query].value, &self.nodes[*keys].value);
                    let (b, s, k) = (kv.shape()[0], kv.shape()[1], kv.shape()[2]);
                    {
                        let gq = acc(&mut grads, *query, qv);
                        for r in 0..b {
                            for t in 0..s {
                                let gv = g.data()[r * s + t];
                                let key = &kv.data()[(r * s + t) * k..(r * s + t + 1) * k];
                                for (o, x) in gq[r * k..(r + 1) * k].iter_mut().zip(key) {
                                    *o += gv * x;
                                }
                            }
                        }
                    }
                    let gk = acc(&mut grads, *keys, kv);
                    for r in 0..b {
                        let q = qv.row(r);
                        for t in 0..s {
                            let gv = g.data()[r * s + t];
                            for (o, x) in gk[(r * s + t) * k..(r * s + t + 1) * k].iter_mut().zip(q) {
                                *o += gv * x;
                            }
                        }
                    }
                }
                Op::WeightedSum { weights, values } => {
                    let (wv, vv) = (&self.nodes[*weights].value, &self.nodes[*values].value);
                    let (b, s, d) = (vv.shape()[0], vv.shape()[1], vv.shape()[2]);
                    {
                        let gw = acc(&mut grads, *weights, wv);
                        for r in 0..b {
                            let gr = &g.data()[r * d..(r + 1) * d];
                            for t in 0..s {
                                let val = &vv.data()[(r * s + t) * d..(r * s + t + 1) * d];
                                gw[r * s + t] += gr.iter().zip(val).map(|(x, y)| x * y).sum::<f64>();
                            }
                        }
                    }
                    let gv = acc(&mut grads, *values, vv);
                    for r in 0..b {
                        let gr = &g.data()[r * d..(r + 1) * d];
                        for t in 0..s {
                            let w = wv.data()[r * s + t];
                            for (o, x) in gv[(r * s + t) * d..(r * s + t + 1) * d].iter_mut().zip(gr) {
                                *o += w * x;
                            }
                        }
                    }
                }
                Op::SelectRows { keep, a, b } => {
                    let d = node.value.last_dim();
                    for (r, &k) in keep.iter().enumerate() {
                        let target = if k { *a } else { *b };
                        let gt = acc(&mut grads, target, &self.nodes[target].value);
                        add_into(&mut gt[r * d..(r + 1) * d], &g.data()[r * d..(r + 1) * d]);
                    }
                }
                Op::Sum(x) => {
                    let gv = g.item();
                    acc(&mut grads, *x, &self.nodes[*x].value).iter_mut().for_each(|o| *o += gv);
                }
                Op::Scale(x, f) => {
                    let gx = acc(&mut grads, *x, &self.nodes[*x].value);
                    for (o, gv) in gx.iter_mut().zip(g.data()) {
                        *o += gv * f;
                    }
                }
            }
        }
        Ok(())
    }
}

/// Gradient buffer for node `i`, allocated on first use.
fn acc<'a>(grads: &'a mut [Option<Tensor>], i: usize, like: &Tensor) -> &'a mut [f64] {
    grads[i].get_or_insert_with(|| Tensor::zeros(like.shape())).data_mut()
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn softmax_row(row: &[f64], live: &dyn Fn(usize) -> bool, out: &mut [f64]) {
    let max = row.iter().enumerate().filter(|(j, _)| live(*j)).map(|(_, &v)| v).fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (j, o) in out.iter_mut().enumerate() {
        *o = if live(j) { (row[j] - max).exp() } else { 0.0 };
        total += *o;
    }
    out.iter_mut().for_each(|o| *o /= total);
}

/// `log softmax(row)[target]`, computed stably.
pub fn log_softmax_at(row: &[f64], target: usize) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row[target] - lse
}

/// Full log-softmax of one row.
pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::{stream_rng, Stream};

    #[test]
    fn softmax_uniform_logits() {
        let mut t = Tape::inference();
        let x = t.constant(Tensor::vector(vec![0.0; 3]));
        let y = t.softmax(x, None).unwrap();
        for &p in t.value(y).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn masked_softmax_zeroes_masked() {
        let mut t = Tape::inference();
        let x = t.constant(Tensor::matrix(1, 3, vec![5.0, 1.0, 2.0]).unwrap());
        let y = t.softmax(x, Some(&[true, false, true])).unwrap();
        let p = t.value(y).data();
        assert_eq!(p[1], 0.0);
        assert!((p[0] + p[2] - 1.0).abs() < 1e-12);
        assert!(t.softmax(x, Some(&[false, false, false])).is_err());
    }

    #[test]
    fn dropout_keep_one_is_identity() {
        let mut t = Tape::training();
        let mut rng = stream_rng(0, Stream::Dropout, 0);
        let x = t.constant(Tensor::vector(vec![1.0, -2.0, 3.5]));
        let y = t.dropout(x, 1.0, &mut rng).unwrap();
        assert_eq!(t.value(y), t.value(x));
        assert!(t.dropout(x, 0.0, &mut rng).is_err());
    }

    #[test]
    fn dropout_inference_is_identity() {
        let mut t = Tape::inference();
        let mut rng = stream_rng(0, Stream::Dropout, 0);
        let x = t.constant(Tensor::vector(vec![1.0, -2.0, 3.5]));
        let y = t.dropout(x, 0.3, &mut rng).unwrap();
        assert_eq!(t.value(y), t.value(x));
    }

    #[test]
    fn cross_entropy_two_class_uniform() {
        let mut t = Tape::inference();
        let x = t.constant(Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap());
        let l = t.cross_entropy(x, &[0], &[1.0]).unwrap();
        assert!((t.value(l).item() - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_target_out_of_range() {
        let mut t = Tape::inference();
        let x = t.constant(Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap());
        assert!(matches!(t.cross_entropy(x, &[2], &[1.0]), Err(Error::OutOfRange { .. })));
    }

    #[test]
    fn matmul_shape_error_names_op() {
        let mut t = Tape::inference();
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::zeros(&[2, 3]));
        let err = t.matmul(a, b).unwrap_err();
        assert!(err.to_string().contains("matmul"));
        assert!(err.to_string().contains("[2, 3]"));
    }

    #[test]
    fn quadratic_gradient() {
        let mut ps = Parameters::new();
        let w = ps.insert("w", Tensor::vector(vec![1.0, 2.0])).unwrap();
        let mut t = Tape::training();
        let wv = t.param(&ps, w);
        let sq = t.mul(wv, wv).unwrap();
        let loss = t.sum(sq);
        t.backward(loss, &mut ps).unwrap();
        assert_eq!(ps.get(w).grad.data(), &[2.0, 4.0]);
        // accumulates
        t.backward(loss, &mut ps).unwrap();
        assert_eq!(ps.get(w).grad.data(), &[4.0, 8.0]);
    }

    #[test]
    fn constant_loss_leaves_grads_zero() {
        let mut ps = Parameters::new();
        let w = ps.insert("w", Tensor::vector(vec![1.0, 2.0])).unwrap();
        let mut t = Tape::training();
        let _ = t.param(&ps, w);
        let c = t.constant(Tensor::scalar(3.0));
        let loss = t.scale(c, 2.0);
        t.backward(loss, &mut ps).unwrap();
        assert_eq!(ps.get(w).grad.data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_foreign_loss() {
        let mut ps = Parameters::new();
        let mut t = Tape::training();
        let x = t.constant(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(t.backward(x, &mut ps), Err(Error::NotScalar(_))));
        let mut other = Tape::training();
        let y = other.constant(Tensor::scalar(1.0));
        assert!(matches!(t.backward(y, &mut ps), Err(Error::NotOnTape)));
    }
}
