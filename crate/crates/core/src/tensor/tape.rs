//! Reverse-mode automatic differentiation over whole tensors.
//!
//! A [`Tape`] is a linear record of a forward computation. Leaves borrow
//! their data from [`Tensor`]s (no copy), intermediate nodes own their
//! values. [`Tape::backward`] walks the record in reverse and returns a
//! [`Gradients`] table; [`backward`] additionally accumulates the result
//! into the leaf tensors' gradient buffers.
//!
//! Gradients are only computed along paths that reach a leaf with
//! `requires_grad`, so frozen weights cost a single matmul in the backward
//! pass instead of two.

use std::borrow::Cow;

use super::kernels::{self, gemm, MatRef};
use super::{Result, Tensor, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    /// `op(a) * op(b)`, operands optionally read transposed.
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    /// Row `i` of `x` times `s[i]`.
    ScaleRows { x: Var, s: Var },
    Column { x: Var, col: usize },
    /// `x / t` for a one-element `t`.
    DivByScalar { x: Var, t: Var },
    Softmax { x: Var, cols: usize },
    Softplus(Var),
    Gelu(Var),
    RmsNorm { x: Var, cols: usize, inv_rms: Vec<f64> },
    Attention { q: Var, k: Var, v: Var, dims: AttnDims, probs: Vec<f64> },
    GatherRows { table: Var, cols: usize, idx: Vec<usize> },
    CrossEntropy { logits: Var, classes: usize, targets: Vec<usize>, probs: Vec<f64> },
    Sum(Var),
    Mean(Var),
    MeanRows { x: Var, rows: usize, cols: usize },
}

#[derive(Debug, Clone, Copy)]
struct AttnDims {
    batch: usize,
    seq: usize,
    heads: usize,
    width: usize,
}

struct Node<'a> {
    value: Cow<'a, [f64]>,
    shape: Vec<usize>,
    op: Op,
    needs_grad: bool,
}

/// A single-threaded record of one forward computation.
#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

fn matrix_dims(shape: &[usize]) -> (usize, usize) {
    match shape {
        [n] => (*n, 1),
        [r, c] => (*r, *c),
        _ => (shape.iter().product(), 1),
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, [f64]>, shape: Vec<usize>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(value.len(), shape.iter().product::<usize>());
        self.nodes.push(Node {
            value,
            shape,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Records a leaf that borrows `t`. It is differentiable iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &'a Tensor) -> Var {
        self.push(Cow::Borrowed(t.data()), t.shape().to_vec(), Op::Leaf, t.requires_grad())
    }

    /// Records a leaf that borrows `t` but is never differentiated.
    pub fn frozen(&mut self, t: &'a Tensor) -> Var {
        self.push(Cow::Borrowed(t.data()), t.shape().to_vec(), Op::Leaf, false)
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        self.owned_leaf(shape, data, false)
    }

    pub fn variable(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        self.owned_leaf(shape, data, true)
    }

    fn owned_leaf(&mut self, shape: Vec<usize>, data: Vec<f64>, needs_grad: bool) -> Result<Var> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(TensorError::Shape {
                op: "leaf",
                left: shape,
                right: vec![data.len()],
            });
        }
        Ok(self.push(Cow::Owned(data), shape, Op::Leaf, needs_grad))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec()).expect("node shape is consistent")
    }

    fn shape_err(&self, op: &'static str, a: Var, b: Var) -> TensorError {
        TensorError::Shape {
            op,
            left: self.shape(a).to_vec(),
            right: self.shape(b).to_vec(),
        }
    }

    fn mat(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(TensorError::Shape {
                op,
                left: s.to_vec(),
                right: vec![],
            }),
        }
    }

    /// `a [m x n] * b [n x p]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, false, b, false)
    }

    /// `a * b^T`, the usual `x W^T` of a linear layer with `W` stored `[out x in]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, false, b, true)
    }

    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var> {
        let (ar, ac) = self.mat(a, "matmul")?;
        let (br, bc) = self.mat(b, "matmul")?;
        let av = MatRef::new(self.value(a), ar, ac, ta);
        let bv = MatRef::new(self.value(b), br, bc, tb);
        if av.cols() != bv.rows() {
            return Err(self.shape_err("matmul", a, b));
        }
        let (m, n) = (av.rows(), bv.cols());
        let mut out = vec![0.0; m * n];
        gemm(av, bv, &mut out, 0.0);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Cow::Owned(out), vec![m, n], Op::MatMul { a, b, ta, tb }, ng))
    }

    fn zip(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.shape_err(name, a, b));
        }
        let out: Vec<f64> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| f(*x, *y)).collect();
        let ng = self.ng(a) || self.ng(b);
        let shape = self.shape(a).to_vec();
        Ok(self.push(Cow::Owned(out), shape, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out: Vec<f64> = self.value(a).iter().map(|x| f(*x)).collect();
        let ng = self.ng(a);
        let shape = self.shape(a).to_vec();
        self.push(Cow::Owned(out), shape, op, ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.map(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.map(a, |x| x + c, Op::AddScalar(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.map(a, kernels::softplus, Op::Softplus(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.map(a, kernels::gelu, Op::Gelu(a))
    }

    /// Multiplies row `i` of the matrix `x` by `s[i]`.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (r, c) = self.mat(x, "scale_rows")?;
        if self.value(s).len() != r {
            return Err(self.shape_err("scale_rows", x, s));
        }
        let xs = self.value(x);
        let ss = self.value(s);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let si = ss[i];
            for (o, v) in out[i * c..(i + 1) * c].iter_mut().zip(&xs[i * c..(i + 1) * c]) {
                *o = v * si;
            }
        }
        let ng = self.ng(x) || self.ng(s);
        Ok(self.push(Cow::Owned(out), vec![r, c], Op::ScaleRows { x, s }, ng))
    }

    pub fn column(&mut self, x: Var, col: usize) -> Result<Var> {
        let (r, c) = self.mat(x, "column")?;
        if col >= c {
            return Err(TensorError::Index {
                op: "column",
                index: col,
                limit: c,
            });
        }
        let out: Vec<f64> = (0..r).map(|i| self.value(x)[i * c + col]).collect();
        let ng = self.ng(x);
        Ok(self.push(Cow::Owned(out), vec![r], Op::Column { x, col }, ng))
    }

    pub fn div_by_scalar(&mut self, x: Var, t: Var) -> Result<Var> {
        if self.value(t).len() != 1 {
            return Err(self.shape_err("div_by_scalar", x, t));
        }
        let tv = self.value(t)[0];
        if !(tv != 0.0) {
            return Err(TensorError::Domain {
                op: "div_by_scalar",
                msg: "division by zero".into(),
            });
        }
        let out: Vec<f64> = self.value(x).iter().map(|v| v / tv).collect();
        let ng = self.ng(x) || self.ng(t);
        let shape = self.shape(x).to_vec();
        Ok(self.push(Cow::Owned(out), shape, Op::DivByScalar { x, t }, ng))
    }

    /// Row-wise softmax of a matrix (a vector is one row).
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        self.masked_softmax_rows(x, None)
    }

    /// Row-wise softmax restricted to `mask` (row-major, same size as `x`);
    /// masked-out entries are exactly zero and receive no gradient.
    pub fn masked_softmax_rows(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (r, c) = match shape.as_slice() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            _ => return Err(TensorError::Shape { op: "softmax_rows", left: shape, right: vec![] }),
        };
        if let Some(m) = mask {
            if m.len() != r * c {
                return Err(TensorError::Shape { op: "softmax_rows", left: shape, right: vec![m.len()] });
            }
            if (0..r).any(|i| !m[i * c..(i + 1) * c].iter().any(|&b| b)) {
                return Err(TensorError::Domain {
                    op: "softmax_rows",
                    msg: "mask removes every entry of a row".into(),
                });
            }
        }
        let xs = self.value(x);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            kernels::softmax_row(
                &xs[i * c..(i + 1) * c],
                mask.map(|m| &m[i * c..(i + 1) * c]),
                &mut out[i * c..(i + 1) * c],
            );
        }
        let ng = self.ng(x);
        Ok(self.push(Cow::Owned(out), shape, Op::Softmax { x, cols: c }, ng))
    }

    /// `x / sqrt(mean(x^2) + eps)` per row, no gain.
    pub fn rms_norm_rows(&mut self, x: Var, eps: f64) -> Result<Var> {
        let (r, c) = self.mat(x, "rms_norm_rows")?;
        let xs = self.value(x);
        let mut out = vec![0.0; r * c];
        let mut inv_rms = vec![0.0; r];
        for i in 0..r {
            let row = &xs[i * c..(i + 1) * c];
            let ms = row.iter().map(|v| v * v).sum::<f64>() / c as f64;
            let inv = 1.0 / (ms + eps).sqrt();
            inv_rms[i] = inv;
            for (o, v) in out[i * c..(i + 1) * c].iter_mut().zip(row) {
                *o = v * inv;
            }
        }
        let ng = self.ng(x);
        Ok(self.push(Cow::Owned(out), vec![r, c], Op::RmsNorm { x, cols: c, inv_rms }, ng))
    }

    /// Causal multi-head attention over `batch` sequences of length `seq`.
    /// `q`, `k`, `v` are `[batch*seq x width]`, heads split the width evenly.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let (r, width) = self.mat(q, "causal_attention")?;
        if self.shape(k) != self.shape(q) || self.shape(v) != self.shape(q) {
            return Err(self.shape_err("causal_attention", q, k));
        }
        if r != batch * seq || heads == 0 || width % heads != 0 {
            return Err(TensorError::Domain {
                op: "causal_attention",
                msg: format!("rows {r} width {width} incompatible with batch {batch} seq {seq} heads {heads}"),
            });
        }
        let dims = AttnDims { batch, seq, heads, width };
        let dh = width / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qs, ks, vs) = (self.value(q), self.value(k), self.value(v));
        let mut out = vec![0.0; r * width];
        let mut probs = vec![0.0; batch * heads * seq * seq];
        let mut scores = vec![0.0; seq];
        for b in 0..batch {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..seq {
                    let qi = &qs[(b * seq + i) * width + off..][..dh];
                    for (j, s) in scores.iter_mut().enumerate().take(i + 1) {
                        let kj = &ks[(b * seq + j) * width + off..][..dh];
                        *s = qi.iter().zip(kj).map(|(x, y)| x * y).sum::<f64>() * scale;
                    }
                    let p = &mut probs[((b * heads + h) * seq + i) * seq..][..seq];
                    kernels::softmax_row(&scores[..=i], None, &mut p[..=i]);
                    let o = &mut out[(b * seq + i) * width + off..][..dh];
                    for (j, &pj) in p.iter().enumerate().take(i + 1) {
                        let vj = &vs[(b * seq + j) * width + off..][..dh];
                        for (oo, vv) in o.iter_mut().zip(vj) {
                            *oo += pj * vv;
                        }
                    }
                }
            }
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        Ok(self.push(Cow::Owned(out), vec![r, width], Op::Attention { q, k, v, dims, probs }, ng))
    }

    /// Selects rows `idx` of a matrix (embedding lookup, row selection).
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.mat(table, "gather_rows")?;
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= r {
                return Err(TensorError::Index { op: "gather_rows", index: i, limit: r });
            }
            out.extend_from_slice(&self.value(table)[i * c..(i + 1) * c]);
        }
        let ng = self.ng(table);
        Ok(self.push(
            Cow::Owned(out),
            vec![idx.len(), c],
            Op::GatherRows { table, cols: c, idx: idx.to_vec() },
            ng,
        ))
    }

    /// Mean cross-entropy of row-wise softmax(logits) against class indices.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (r, c) = self.mat(logits, "cross_entropy")?;
        if r != targets.len() || r == 0 {
            return Err(TensorError::Shape { op: "cross_entropy", left: vec![r, c], right: vec![targets.len()] });
        }
        let ls = self.value(logits);
        let mut probs = vec![0.0; r * c];
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            if t >= c {
                return Err(TensorError::Index { op: "cross_entropy", index: t, limit: c });
            }
            let row = &ls[i * c..(i + 1) * c];
            kernels::softmax_row(row, None, &mut probs[i * c..(i + 1) * c]);
            total += kernels::log_sum_exp(row) - row[t];
        }
        let ng = self.ng(logits);
        Ok(self.push(
            Cow::Owned(vec![total / r as f64]),
            vec![1],
            Op::CrossEntropy { logits, classes: c, targets: targets.to_vec(), probs },
            ng,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let ng = self.ng(a);
        self.push(Cow::Owned(vec![s]), vec![1], Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.value(a).iter().sum::<f64>() / n;
        let ng = self.ng(a);
        self.push(Cow::Owned(vec![s]), vec![1], Op::Mean(a), ng)
    }

    /// Column means of a `[rows x cols]` matrix, giving a `[cols]` vector.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.mat(x, "mean_rows")?;
        if r == 0 {
            return Err(TensorError::Domain { op: "mean_rows", msg: "no rows".into() });
        }
        let mut out = vec![0.0; c];
        for row in self.value(x).chunks_exact(c) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= r as f64);
        let ng = self.ng(x);
        Ok(self.push(Cow::Owned(out), vec![c], Op::MeanRows { x, rows: r, cols: c }, ng))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let p = self.mul(a, b)?;
        Ok(self.sum(p))
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(TensorError::Shape {
                op: "backward",
                left: self.shape(loss).to_vec(),
                right: vec![1],
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node<'a>, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| -> &[f64] { &self.nodes[v.0].value };
        let want = |v: Var| self.nodes[v.0].needs_grad;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            let n = self.nodes[v.0].value.len();
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
            f(buf);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => {
                let (ar, ac) = matrix_dims(self.shape(*a));
                let (br, bc) = matrix_dims(self.shape(*b));
                let (m, n) = (node.shape[0], node.shape[1]);
                let gv = MatRef::new(g, m, n, false);
                let gt = MatRef::new(g, m, n, true);
                if want(*a) {
                    acc(*a, &mut |buf| {
                        if *ta {
                            // a stored [k x m]: da = op(b) * g^T
                            gemm(MatRef::new(val(*b), br, bc, *tb), gt, buf, 1.0);
                        } else {
                            // a stored [m x k]: da = g * op(b)^T
                            gemm(gv, MatRef::new(val(*b), br, bc, !*tb), buf, 1.0);
                        }
                    });
                }
                if want(*b) {
                    acc(*b, &mut |buf| {
                        if *tb {
                            // b stored [n x k]: db = g^T * op(a)
                            gemm(gt, MatRef::new(val(*a), ar, ac, *ta), buf, 1.0);
                        } else {
                            // b stored [k x n]: db = op(a)^T * g
                            gemm(MatRef::new(val(*a), ar, ac, !*ta), gv, buf, 1.0);
                        }
                    });
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if want(v) {
                        acc(v, &mut |buf| add_into(buf, g));
                    }
                }
            }
            Op::Sub(a, b) => {
                if want(*a) {
                    acc(*a, &mut |buf| add_into(buf, g));
                }
                if want(*b) {
                    acc(*b, &mut |buf| buf.iter_mut().zip(g).for_each(|(o, x)| *o -= x));
                }
            }
            Op::Mul(a, b) => {
                if want(*a) {
                    let bv = val(*b);
                    acc(*a, &mut |buf| {
                        for ((o, x), y) in buf.iter_mut().zip(g).zip(bv) {
                            *o += x * y;
                        }
                    });
                }
                if want(*b) {
                    let av = val(*a);
                    acc(*b, &mut |buf| {
                        for ((o, x), y) in buf.iter_mut().zip(g).zip(av) {
                            *o += x * y;
                        }
                    });
                }
            }
            Op::Scale(a, c) => {
                if want(*a) {
                    acc(*a, &mut |buf| buf.iter_mut().zip(g).for_each(|(o, x)| *o += x * c));
                }
            }
            Op::AddScalar(a) => {
                if want(*a) {
                    acc(*a, &mut |buf| add_into(buf, g));
                }
            }
            Op::ScaleRows { x, s } => {
                let c = node.shape[1];
                if want(*x) {
                    let sv = val(*s);
                    acc(*x, &mut |buf| {
                        for (i, si) in sv.iter().enumerate() {
                            for (o, gg) in buf[i * c..(i + 1) * c].iter_mut().zip(&g[i * c..(i + 1) * c]) {
                                *o += gg * si;
                            }
                        }
                    });
                }
                if want(*s) {
                    let xv = val(*x);
                    acc(*s, &mut |buf| {
                        for (i, o) in buf.iter_mut().enumerate() {
                            *o += g[i * c..(i + 1) * c]
                                .iter()
                                .zip(&xv[i * c..(i + 1) * c])
                                .map(|(a, b)| a * b)
                                .sum::<f64>();
                        }
                    });
                }
            }
            Op::Column { x, col } => {
                if want(*x) {
                    let c = self.shape(*x)[1];
                    acc(*x, &mut |buf| {
                        for (i, gg) in g.iter().enumerate() {
                            buf[i * c + col] += gg;
                        }
                    });
                }
            }
            Op::DivByScalar { x, t } => {
                let tv = val(*t)[0];
                if want(*x) {
                    acc(*x, &mut |buf| buf.iter_mut().zip(g).for_each(|(o, gg)| *o += gg / tv));
                }
                if want(*t) {
                    // out = x / t  =>  d/dt = -out / t
                    let dt: f64 = g.iter().zip(node.value.iter()).map(|(gg, o)| -gg * o / tv).sum();
                    acc(*t, &mut |buf| buf[0] += dt);
                }
            }
            Op::Softmax { x, cols } => {
                if want(*x) {
                    let y = &node.value;
                    acc(*x, &mut |buf| {
                        for ((yr, gr), br) in y.chunks_exact(*cols).zip(g.chunks_exact(*cols)).zip(buf.chunks_exact_mut(*cols)) {
                            let dotp: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                            for ((o, yy), gg) in br.iter_mut().zip(yr).zip(gr) {
                                *o += yy * (gg - dotp);
                            }
                        }
                    });
                }
            }
            Op::Softplus(a) => {
                if want(*a) {
                    let av = val(*a);
                    acc(*a, &mut |buf| {
                        for ((o, gg), x) in buf.iter_mut().zip(g).zip(av) {
                            *o += gg * kernels::sigmoid(*x);
                        }
                    });
                }
            }
            Op::Gelu(a) => {
                if want(*a) {
                    let av = val(*a);
                    acc(*a, &mut |buf| {
                        for ((o, gg), x) in buf.iter_mut().zip(g).zip(av) {
                            *o += gg * kernels::gelu_grad(*x);
                        }
                    });
                }
            }
            Op::RmsNorm { x, cols, inv_rms } => {
                if want(*x) {
                    let xv = val(*x);
                    let c = *cols;
                    acc(*x, &mut |buf| {
                        for (i, &r) in inv_rms.iter().enumerate() {
                            let xr = &xv[i * c..(i + 1) * c];
                            let gr = &g[i * c..(i + 1) * c];
                            let gx: f64 = xr.iter().zip(gr).map(|(a, b)| a * b).sum();
                            let coef = r * r * r * gx / c as f64;
                            for ((o, xx), gg) in buf[i * c..(i + 1) * c].iter_mut().zip(xr).zip(gr) {
                                *o += r * gg - coef * xx;
                            }
                        }
                    });
                }
            }
            Op::Attention { q, k, v, dims, probs } => self.attention_backward(*q, *k, *v, *dims, probs, g, grads),
            Op::GatherRows { table, cols, idx } => {
                if want(*table) {
                    let c = *cols;
                    acc(*table, &mut |buf| {
                        for (r, &i) in idx.iter().enumerate() {
                            add_into(&mut buf[i * c..(i + 1) * c], &g[r * c..(r + 1) * c]);
                        }
                    });
                }
            }
            Op::CrossEntropy { logits, classes, targets, probs } => {
                if want(*logits) {
                    let scale = g[0] / targets.len() as f64;
                    let c = *classes;
                    acc(*logits, &mut |buf| {
                        for (i, &t) in targets.iter().enumerate() {
                            let br = &mut buf[i * c..(i + 1) * c];
                            for (o, p) in br.iter_mut().zip(&probs[i * c..(i + 1) * c]) {
                                *o += scale * p;
                            }
                            br[t] -= scale;
                        }
                    });
                }
            }
            Op::Sum(a) => {
                if want(*a) {
                    acc(*a, &mut |buf| buf.iter_mut().for_each(|o| *o += g[0]));
                }
            }
            Op::Mean(a) => {
                if want(*a) {
                    let n = val(*a).len() as f64;
                    acc(*a, &mut |buf| buf.iter_mut().for_each(|o| *o += g[0] / n));
                }
            }
            Op::MeanRows { x, rows, cols } => {
                if want(*x) {
                    let inv = 1.0 / *rows as f64;
                    acc(*x, &mut |buf| {
                        for row in buf.chunks_exact_mut(*cols) {
                            for (o, gg) in row.iter_mut().zip(g) {
                                *o += gg * inv;
                            }
                        }
                    });
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        dims: AttnDims,
        probs: &[f64],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let AttnDims { batch, seq, heads, width } = dims;
        let dh = width / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qs, ks, vs) = (self.value(q), self.value(k), self.value(v));
        let n = batch * seq * width;
        let mut dq = vec![0.0; n];
        let mut dk = vec![0.0; n];
        let mut dv = vec![0.0; n];
        let mut dp = vec![0.0; seq];
        for b in 0..batch {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..seq {
                    let row = (b * seq + i) * width + off;
                    let gi = &g[row..row + dh];
                    let p = &probs[((b * heads + h) * seq + i) * seq..][..seq];
                    for j in 0..=i {
                        let col = (b * seq + j) * width + off;
                        dp[j] = gi.iter().zip(&vs[col..col + dh]).map(|(x, y)| x * y).sum();
                        for (o, gg) in dv[col..col + dh].iter_mut().zip(gi) {
                            *o += p[j] * gg;
                        }
                    }
                    let pdp: f64 = (0..=i).map(|j| p[j] * dp[j]).sum();
                    for j in 0..=i {
                        let ds = p[j] * (dp[j] - pdp) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let col = (b * seq + j) * width + off;
                        for t in 0..dh {
                            dq[row + t] += ds * ks[col + t];
                            dk[col + t] += ds * qs[row + t];
                        }
                    }
                }
            }
        }
        for (var, d) in [(q, dq), (k, dk), (v, dv)] {
            if self.nodes[var.0].needs_grad {
                match grads[var.0].as_mut() {
                    Some(buf) => add_into(buf, &d),
                    None => grads[var.0] = Some(d),
                }
            }
        }
    }
}

fn add_into(buf: &mut [f64], g: &[f64]) {
    for (o, x) in buf.iter_mut().zip(g) {
        *o += x;
    }
}

/// Gradients from one reverse sweep, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of `v` into `t`'s buffer (no-op if `v` got none).
    pub fn accumulate_into(&self, v: Var, t: &mut Tensor) -> Result<()> {
        match self.get(v) {
            Some(g) => t.accumulate_grad(g),
            None => Ok(()),
        }
    }
}

/// Runs the reverse sweep and accumulates into each `(leaf, tensor)` pair.
/// Repeated calls without [`Tensor::zero_grad`] accumulate.
pub fn backward(tape: &Tape<'_>, loss: Var, leaves: &mut [(Var, &mut Tensor)]) -> Result<()> {
    let grads = tape.backward(loss)?;
    for (v, t) in leaves.iter_mut() {
        grads.accumulate_into(*v, t)?;
    }
    Ok(())
}
