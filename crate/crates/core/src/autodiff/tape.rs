//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value and enough
//! bookkeeping to propagate gradients. [`Tape::backward`] walks the nodes in
//! exact reverse order of recording.

use super::tensor::{self, dot_slices, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    SoftmaxRows(Var),
    LayerNormRows {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    L2NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    GatherRows(Var, Vec<usize>),
    GatherElements(Var, Vec<(usize, usize)>),
    MaxRows(Var, Vec<usize>),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Dot(Var, Var),
    Sum(Var),
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Ordered record of operations. Execution order is a topological order.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients indexed by [`Var`]; `None` where no gradient flowed.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn dim_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Dimension {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input tensor; gradients flow to it iff `requires_grad` is set.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let needs_grad = t.requires_grad();
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a copy of a trainable parameter.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.leaf(t.clone().with_requires_grad(true))
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|&v| self.needs(v));
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::matmul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::matmul_nt(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMulNt(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.value(a).dims2()?;
        let out = self.value(a).transpose();
        Ok(self.push(out, Op::Transpose(a), &[a]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(dim_err("add", ta, tb));
        }
        let mut out = ta.clone().with_requires_grad(false);
        out.add_assign(tb);
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    /// Adds a `[1, c]` row to every row of an `[r, c]` tensor.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tr) = (self.value(a), self.value(row));
        let (r, c) = ta.dims2()?;
        if tr.shape() != [1, c] {
            return Err(dim_err("add_row", ta, tr));
        }
        let mut out = ta.clone().with_requires_grad(false);
        for i in 0..r {
            for (o, b) in out.row_mut(i).iter_mut().zip(tr.data()) {
                *o += b;
            }
        }
        Ok(self.push(out, Op::AddRow(a, row), &[a, row]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let mut out = self.value(a).clone().with_requires_grad(false);
        out.data_mut().iter_mut().for_each(|x| *x *= c);
        self.push(out, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let mut out = self.value(a).clone().with_requires_grad(false);
        out.data_mut().iter_mut().for_each(|x| *x += c);
        self.push(out, Op::AddScalar(a), &[a])
    }

    /// Clamp at zero from below. Subgradient at exactly zero is zero.
    pub fn relu(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone().with_requires_grad(false);
        out.data_mut().iter_mut().for_each(|x| *x = x.max(0.0));
        self.push(out, Op::Relu(a), &[a])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let out = tensor::softmax_rows(self.value(a))?;
        Ok(self.push(out, Op::SoftmaxRows(a), &[a]))
    }

    /// Per-row layer normalization with learned `[1, c]` gain and bias.
    pub fn layer_norm_rows(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let tx = self.value(x);
        let (r, c) = tx.dims2()?;
        let (tg, tb) = (self.value(gain), self.value(bias));
        if tg.shape() != [1, c] || tb.shape() != [1, c] {
            return Err(dim_err("layer_norm", tx, tg));
        }
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = Vec::with_capacity(r);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = tx.row(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[i * c + j] = h;
                out[i * c + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let op = Op::LayerNormRows {
            x,
            gain,
            bias,
            xhat,
            inv_std,
        };
        Ok(self.push(Tensor::matrix(r, c, out), op, &[x, gain, bias]))
    }

    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (out, norms) = tensor::l2_normalize_rows(self.value(x))?;
        Ok(self.push(out, Op::L2NormalizeRows { x, norms }, &[x]))
    }

    /// Output row `i` is input row `idx[i]`.
    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Result<Var> {
        let ta = self.value(a);
        let (r, c) = ta.dims2()?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::contract(format!("gather_rows index {bad} >= {r}")));
        }
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in &idx {
            out.extend_from_slice(ta.row(i));
        }
        let t = Tensor::matrix(idx.len(), c, out);
        Ok(self.push(t, Op::GatherRows(a, idx), &[a]))
    }

    /// Picks individual `(row, col)` entries into an `[n, 1]` column.
    pub fn gather_elements(&mut self, a: Var, pos: Vec<(usize, usize)>) -> Result<Var> {
        let ta = self.value(a);
        let (r, c) = ta.dims2()?;
        let mut out = Vec::with_capacity(pos.len());
        for &(i, j) in &pos {
            if i >= r || j >= c {
                return Err(Error::contract(format!(
                    "gather_elements ({i},{j}) outside [{r}, {c}]"
                )));
            }
            out.push(ta.get(i, j));
        }
        let t = Tensor::matrix(pos.len(), 1, out);
        Ok(self.push(t, Op::GatherElements(a, pos), &[a]))
    }

    /// Row-wise maximum as an `[r, 1]` column. Ties go to the first maximizer.
    pub fn max_rows(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (r, c) = ta.dims2()?;
        if c == 0 {
            return Err(Error::degenerate("max over empty rows"));
        }
        let mut arg = Vec::with_capacity(r);
        let mut out = Vec::with_capacity(r);
        for i in 0..r {
            let row = ta.row(i);
            let mut best = 0;
            for (j, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = j;
                }
            }
            arg.push(best);
            out.push(row[best]);
        }
        let t = Tensor::matrix(r, 1, out);
        Ok(self.push(t, Op::MaxRows(a, arg), &[a]))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ta = self.value(a);
        let (r, c) = ta.dims2()?;
        if start + len > c {
            return Err(Error::contract(format!(
                "slice_cols {start}..{} of {c} columns",
                start + len
            )));
        }
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&ta.row(i)[start..start + len]);
        }
        Ok(self.push(Tensor::matrix(r, len, out), Op::SliceCols(a, start), &[a]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("concat of nothing"))?;
        let r = self.value(*first).rows();
        let mut total = 0;
        for &p in parts {
            let t = self.value(p);
            if t.dims2()?.0 != r {
                return Err(dim_err("concat_cols", self.value(*first), t));
            }
            total += t.cols();
        }
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let t = Tensor::matrix(r, total, out);
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("concat of nothing"))?;
        let c = self.value(*first).cols();
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.dims2()?.1 != c {
                return Err(dim_err("concat_rows", self.value(*first), t));
            }
            rows += t.rows();
            out.extend_from_slice(t.data());
        }
        let t = Tensor::matrix(rows, c, out);
        Ok(self.push(t, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Full inner product of two same-shaped tensors, as a `[1, 1]` scalar.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(dim_err("dot", ta, tb));
        }
        let s = dot_slices(ta.data(), tb.data());
        Ok(self.push(Tensor::scalar(s), Op::Dot(a, b), &[a, b]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    /// Mean cross-entropy of row-wise softmax over `[n, classes]` logits.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: Vec<usize>) -> Result<Var> {
        let t = self.value(logits);
        let (r, c) = t.dims2()?;
        if labels.len() != r {
            return Err(Error::contract(format!(
                "{} labels for {r} logit rows",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::contract(format!("label {bad} >= {c} classes")));
        }
        let probs = tensor::softmax_rows(t)?.into_data();
        let mut loss = 0.0;
        for (i, &l) in labels.iter().enumerate() {
            // log-sum-exp form keeps the loss finite when the probability underflows
            let row = t.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[l];
        }
        loss /= r as f64;
        let op = Op::SoftmaxCrossEntropy {
            logits,
            labels,
            probs,
        };
        Ok(self.push(Tensor::scalar(loss), op, &[logits]))
    }

    /// Gradients of a scalar node with respect to every node on the tape.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let t = self.value(loss);
        if t.numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                t.shape()
            )));
        }
        let seed = Tensor::new(t.shape().to_vec(), vec![1.0])?;
        self.backward_seeded(&[(loss, seed)])
    }

    /// Vector-Jacobian product: propagates the given output cotangents.
    pub fn backward_seeded(&self, seeds: &[(Var, Tensor)]) -> Result<Gradients> {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut last = 0;
        for (v, g) in seeds {
            if g.shape() != self.value(*v).shape() {
                return Err(dim_err("backward seed", self.value(*v), g));
            }
            accumulate(&mut grads, *v, g.clone());
            last = last.max(v.0);
        }
        for idx in (0..=last).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.needs(*a) {
                    accumulate(grads, *a, tensor::matmul_nt(g, self.value(*b))?);
                }
                if self.needs(*b) {
                    accumulate(grads, *b, tensor::matmul_tn(self.value(*a), g)?);
                }
            }
            Op::MatMulNt(a, b) => {
                if self.needs(*a) {
                    accumulate(grads, *a, tensor::matmul(g, self.value(*b))?);
                }
                if self.needs(*b) {
                    accumulate(grads, *b, tensor::matmul_tn(g, self.value(*a))?);
                }
            }
            Op::Transpose(a) => {
                if self.needs(*a) {
                    accumulate(grads, *a, g.transpose());
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if self.needs(*v) {
                        accumulate(grads, *v, g.clone());
                    }
                }
            }
            Op::AddRow(a, row) => {
                if self.needs(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.needs(*row) {
                    accumulate(grads, *row, column_sums(g));
                }
            }
            Op::Scale(a, c) => {
                if self.needs(*a) {
                    let mut d = g.clone();
                    d.data_mut().iter_mut().for_each(|x| *x *= c);
                    accumulate(grads, *a, d);
                }
            }
            Op::AddScalar(a) => {
                if self.needs(*a) {
                    accumulate(grads, *a, g.clone());
                }
            }
            Op::Relu(a) => {
                if self.needs(*a) {
                    let mut d = g.clone();
                    for (x, inp) in d.data_mut().iter_mut().zip(self.value(*a).data()) {
                        if *inp <= 0.0 {
                            *x = 0.0;
                        }
                    }
                    accumulate(grads, *a, d);
                }
            }
            Op::SoftmaxRows(a) => {
                if self.needs(*a) {
                    let y = &node.value;
                    let (r, _) = y.dims2()?;
                    let mut d = g.clone();
                    for i in 0..r {
                        let s = dot_slices(g.row(i), y.row(i));
                        for (dx, (gy, yy)) in
                            d.row_mut(i).iter_mut().zip(g.row(i).iter().zip(y.row(i)))
                        {
                            *dx = yy * (gy - s);
                        }
                    }
                    accumulate(grads, *a, d);
                }
            }
            Op::LayerNormRows {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (r, c) = g.dims2()?;
                if self.needs(*bias) {
                    accumulate(grads, *bias, column_sums(g));
                }
                if self.needs(*gain) {
                    let mut d = vec![0.0; c];
                    for i in 0..r {
                        for j in 0..c {
                            d[j] += g.get(i, j) * xhat[i * c + j];
                        }
                    }
                    accumulate(grads, *gain, Tensor::matrix(1, c, d));
                }
                if self.needs(*x) {
                    let gd = self.value(*gain).data();
                    let mut d = vec![0.0; r * c];
                    let n = c as f64;
                    for i in 0..r {
                        let mut sum_d = 0.0;
                        let mut sum_dx = 0.0;
                        for j in 0..c {
                            let dh = g.get(i, j) * gd[j];
                            sum_d += dh;
                            sum_dx += dh * xhat[i * c + j];
                        }
                        for j in 0..c {
                            let dh = g.get(i, j) * gd[j];
                            d[i * c + j] =
                                inv_std[i] / n * (n * dh - sum_d - xhat[i * c + j] * sum_dx);
                        }
                    }
                    accumulate(grads, *x, Tensor::matrix(r, c, d));
                }
            }
            Op::L2NormalizeRows { x, norms } => {
                if self.needs(*x) {
                    let y = &node.value;
                    let (r, _) = y.dims2()?;
                    let mut d = g.clone();
                    for i in 0..r {
                        let s = dot_slices(g.row(i), y.row(i));
                        for (dx, (gy, yy)) in
                            d.row_mut(i).iter_mut().zip(g.row(i).iter().zip(y.row(i)))
                        {
                            *dx = (gy - yy * s) / norms[i];
                        }
                    }
                    accumulate(grads, *x, d);
                }
            }
            Op::GatherRows(a, idx_list) => {
                if self.needs(*a) {
                    let mut d = Tensor::zeros(self.value(*a).shape().to_vec());
                    for (out_row, &src) in idx_list.iter().enumerate() {
                        for (dx, gy) in d.row_mut(src).iter_mut().zip(g.row(out_row)) {
                            *dx += gy;
                        }
                    }
                    accumulate(grads, *a, d);
                }
            }
            Op::GatherElements(a, pos) => {
                if self.needs(*a) {
                    let ta = self.value(*a);
                    let c = ta.cols();
                    let mut d = Tensor::zeros(ta.shape().to_vec());
                    for (n, &(i, j)) in pos.iter().enumerate() {
                        d.data_mut()[i * c + j] += g.data()[n];
                    }
                    accumulate(grads, *a, d);
                }
            }
            Op::MaxRows(a, arg) => {
                if self.needs(*a) {
                    let ta = self.value(*a);
                    let c = ta.cols();
                    let mut d = Tensor::zeros(ta.shape().to_vec());
                    for (i, &j) in arg.iter().enumerate() {
                        d.data_mut()[i * c + j] += g.data()[i];
                    }
                    accumulate(grads, *a, d);
                }
            }
            Op::SliceCols(a, start) => {
                if self.needs(*a) {
                    let ta = self.value(*a);
                    let len = g.cols();
                    let mut d = Tensor::zeros(ta.shape().to_vec());
                    for i in 0..g.rows() {
                        d.row_mut(i)[*start..*start + len].copy_from_slice(g.row(i));
                    }
                    accumulate(grads, *a, d);
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.needs(p) {
                        let mut d = Vec::with_capacity(g.rows() * w);
                        for i in 0..g.rows() {
                            d.extend_from_slice(&g.row(i)[offset..offset + w]);
                        }
                        accumulate(grads, p, Tensor::matrix(g.rows(), w, d));
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let c = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let h = self.value(p).rows();
                    if self.needs(p) {
                        let d = g.data()[offset * c..(offset + h) * c].to_vec();
                        accumulate(grads, p, Tensor::matrix(h, c, d));
                    }
                    offset += h;
                }
            }
            Op::Dot(a, b) => {
                let s = g.data()[0];
                for (v, other) in [(a, b), (b, a)] {
                    if self.needs(*v) {
                        let mut d = self.value(*other).clone().with_requires_grad(false);
                        d.data_mut().iter_mut().for_each(|x| *x *= s);
                        accumulate(grads, *v, d);
                    }
                }
            }
            Op::Sum(a) => {
                if self.needs(*a) {
                    let shape = self.value(*a).shape().to_vec();
                    let n = shape.iter().product();
                    accumulate(grads, *a, Tensor::new(shape, vec![g.data()[0]; n])?);
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                if self.needs(*logits) {
                    let t = self.value(*logits);
                    let (r, c) = t.dims2()?;
                    let s = g.data()[0] / r as f64;
                    let mut d = probs.clone();
                    for (i, &l) in labels.iter().enumerate() {
                        d[i * c + l] -= 1.0;
                    }
                    d.iter_mut().for_each(|x| *x *= s);
                    accumulate(grads, *logits, Tensor::matrix(r, c, d));
                }
            }
        }
        Ok(())
    }
}

fn column_sums(g: &Tensor) -> Tensor {
    let c = g.cols();
    let mut out = vec![0.0; c];
    for i in 0..g.rows() {
        for (o, x) in out.iter_mut().zip(g.row(i)) {
            *o += x;
        }
    }
    Tensor::matrix(1, c, out)
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot => *slot = Some(g),
    }
}
