//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] is a Wengert list: every forward op appends a node holding its
//! value and the parent references needed to replay the chain rule. Nodes are
//! appended in execution order, so the list is already topologically sorted
//! and [`Graph::backward`] is a single reverse sweep.
//!
//! Shape conventions are deliberately narrow. "Row" ops treat a tensor as
//! `[rows, last_dim]`; `matmul` is 2-D only and `bmm` is 3-D only. Anything
//! else is expressed with `reshape` and `gather_rows`.

use std::collections::BTreeMap;

use super::params::ParamStore;
use super::tensor::{numel, Tensor};
use crate::error::{shape_err, Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Bmm(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Concat(Vec<Var>),
    Slice(Var, usize, usize),
    Sum(Var),
    SumRows(Var),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Softmax(Var),
    LogSoftmax(Var),
    GatherRows(Var, Vec<usize>),
    PickCols(Var, Vec<usize>),
    Dropout(Var, Vec<f64>),
    WeightNorm(Var, Var),
    Reshape(Var),
}

#[derive(Clone, Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

/// Recording of one forward computation.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    consumed: bool,
    params: BTreeMap<String, Var>,
    memo: BTreeMap<String, Var>,
    frozen: Vec<String>,
}

fn last_dim(shape: &[usize]) -> usize {
    shape.last().copied().unwrap_or(1)
}

/// `c = beta * c + op(a) * op(b)` for row-major matrices.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    beta: f64,
) {
    // a is m×k (stored k×m when transposed), b is k×n (stored n×k when transposed)
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for x in c.iter_mut().take(m * n) {
            *x *= beta;
        }
        return;
    }
    // SAFETY: slice lengths are checked above and the strides describe
    // exactly the row-major layouts of the three buffers.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_rows(x: &[f64], cols: usize, log: bool) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (src, dst) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (d, s) in dst.iter_mut().zip(src) {
            *d = (s - max).exp();
            sum += *d;
        }
        if log {
            let lse = sum.ln();
            for (d, s) in dst.iter_mut().zip(src) {
                *d = s - max - lse;
            }
        } else {
            for d in dst.iter_mut() {
                *d /= sum;
            }
        }
    }
    out
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Graph whose parameter leaves under any of `prefixes` do not require grad.
    pub fn with_frozen<S: AsRef<str>>(prefixes: &[S]) -> Self {
        Graph {
            frozen: prefixes.iter().map(|p| p.as_ref().to_string()).collect(),
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, parents: &[Var]) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, t: Tensor) -> Var {
        let requires_grad = t.requires_grad;
        let shape = t.shape().to_vec();
        self.nodes.push(Node {
            shape,
            value: t.into_data(),
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, shape: &[usize], value: Vec<f64>) -> Result<Var> {
        Ok(self.leaf(Tensor::new(shape.to_vec(), value)?))
    }

    pub fn zeros(&mut self, shape: &[usize]) -> Var {
        self.leaf(Tensor::zeros(shape))
    }

    /// Binds a stored parameter as a leaf; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let t = store
            .get(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        let frozen = self.frozen.iter().any(|p| name.starts_with(p.as_str()));
        let mut leaf = Tensor::new(t.shape().to_vec(), t.data().to_vec())?;
        leaf.requires_grad = !frozen;
        let v = self.leaf(leaf);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    /// Returns a node memoized under `key`, building it on first use.
    pub fn memo<F>(&mut self, key: &str, build: F) -> Result<Var>
    where
        F: FnOnce(&mut Graph) -> Result<Var>,
    {
        if let Some(&v) = self.memo.get(key) {
            return Ok(v);
        }
        let v = build(self)?;
        self.memo.insert(key.to_string(), v);
        Ok(v)
    }

    pub fn bound_params(&self) -> impl Iterator<Item = (&str, Var)> {
        self.params.iter().map(|(k, v)| (k.as_str(), *v))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    // ---------------------------------------------------------------- ops

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return shape_err("matmul", sa, sb);
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a), false, self.value(b), false, &mut out, 0.0);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), &[a, b]))
    }

    /// Batched matmul `[b, m, k] x [b, k, n] -> [b, m, n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return shape_err("bmm", sa, sb);
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; bs * m * n];
        let (va, vb) = (self.value(a), self.value(b));
        for i in 0..bs {
            gemm(
                m,
                k,
                n,
                &va[i * m * k..],
                false,
                &vb[i * k * n..],
                false,
                &mut out[i * m * n..(i + 1) * m * n],
                0.0,
            );
        }
        Ok(self.push(vec![bs, m, n], out, Op::Bmm(a, b), &[a, b]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return shape_err(op, self.shape(a), self.shape(b));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x - y).collect();
        Ok(self.push(self.shape(a).to_vec(), out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul(a, b), &[a, b]))
    }

    /// Adds a `[n]` row vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let n = last_dim(self.shape(a));
        if self.shape(row) != [n] {
            return shape_err("add_row", self.shape(a), self.shape(row));
        }
        let r = self.value(row);
        let out = self
            .value(a)
            .chunks(n)
            .flat_map(|c| c.iter().zip(r).map(|(x, y)| x + y))
            .collect();
        Ok(self.push(self.shape(a).to_vec(), out, Op::AddRow(a, row), &[a, row]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.value(a).iter().map(|x| x * s).collect();
        Ok(self.push(self.shape(a).to_vec(), out, Op::Scale(a, s), &[a]))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.value(a).iter().map(|x| x + s).collect();
        Ok(self.push(self.shape(a).to_vec(), out, Op::AddScalar(a), &[a]))
    }

    /// Concatenation along the last axis; leading dims must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Invalid("concat of zero tensors".into()));
        };
        let lead = &self.shape(first)[..self.shape(first).len().saturating_sub(1)];
        let lead = lead.to_vec();
        let rows = numel(&lead);
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != lead.len() + 1 || s[..lead.len()] != lead[..] {
                return shape_err("concat", self.shape(first), s);
            }
            widths.push(last_dim(s));
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p);
            for r in 0..rows {
                out[r * total + off..r * total + off + w].copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let mut shape = lead;
        shape.push(total);
        Ok(self.push(shape, out, Op::Concat(parts.to_vec()), parts))
    }

    /// Columns `[start, start + len)` of the last axis.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let n = last_dim(&s);
        if start + len > n {
            return shape_err("slice", &s, &[start, len]);
        }
        let out = self
            .value(a)
            .chunks(n)
            .flat_map(|c| c[start..start + len].iter().copied())
            .collect();
        let mut shape = s;
        *shape.last_mut().unwrap() = len;
        Ok(self.push(shape, out, Op::Slice(a, start, len), &[a]))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.value(a).iter().sum();
        Ok(self.push(vec![], vec![s], Op::Sum(a), &[a]))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    /// Sum over the last axis: `[.., n] -> [..]`.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let n = last_dim(&s);
        let out = self.value(a).chunks(n).map(|c| c.iter().sum()).collect();
        let shape = s[..s.len().saturating_sub(1)].to_vec();
        Ok(self.push(shape, out, Op::SumRows(a), &[a]))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(a).iter().map(|&x| f(x)).collect();
        self.push(self.shape(a).to_vec(), out, op, &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        Ok(self.unary(a, |x| x.max(0.0), Op::Relu(a)))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        Ok(self.unary(a, f64::tanh, Op::Tanh(a)))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        Ok(self.unary(a, sigmoid, Op::Sigmoid(a)))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        Ok(self.unary(a, f64::exp, Op::Exp(a)))
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let out = softmax_rows(self.value(a), last_dim(self.shape(a)), false);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Softmax(a), &[a]))
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let out = softmax_rows(self.value(a), last_dim(self.shape(a)), true);
        Ok(self.push(self.shape(a).to_vec(), out, Op::LogSoftmax(a), &[a]))
    }

    /// Row lookup on a 2-D table; also used to broadcast rows.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(table);
        if s.len() != 2 {
            return shape_err("gather_rows", s, &[idx.len()]);
        }
        let (rows, d) = (s[0], s[1]);
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return shape_err("gather_rows", s, &[bad]);
        }
        let src = self.value(table);
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        Ok(self.push(vec![idx.len(), d], out, Op::GatherRows(table, idx.to_vec()), &[table]))
    }

    /// Picks one column per row: `[m, n] -> [m]`.
    pub fn pick_cols(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 || s[0] != idx.len() || idx.iter().any(|&i| i >= s[1]) {
            return shape_err("pick_cols", s, &[idx.len()]);
        }
        let n = s[1];
        let v = self.value(a);
        let out = idx.iter().enumerate().map(|(r, &c)| v[r * n + c]).collect();
        Ok(self.push(vec![idx.len()], out, Op::PickCols(a, idx.to_vec()), &[a]))
    }

    /// Inverted dropout with an explicit keep-mask (`true` keeps).
    pub fn dropout(&mut self, a: Var, keep: &[bool], rate: f64) -> Result<Var> {
        if keep.len() != self.value(a).len() {
            return shape_err("dropout", self.shape(a), &[keep.len()]);
        }
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Invalid(format!("dropout rate {rate} outside [0, 1)")));
        }
        let scale = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = keep.iter().map(|&k| if k { scale } else { 0.0 }).collect();
        let out = self.value(a).iter().zip(&mask).map(|(x, m)| x * m).collect();
        Ok(self.push(self.shape(a).to_vec(), out, Op::Dropout(a, mask), &[a]))
    }

    /// Weight-normalized matrix: column `j` of `v` (`[in, out]`) rescaled to norm `g[j]`.
    pub fn weight_norm(&mut self, v: Var, g: Var) -> Result<Var> {
        let s = self.shape(v).to_vec();
        if s.len() != 2 || self.shape(g) != [s[1]] {
            return shape_err("weight_norm", &s, self.shape(g));
        }
        let (rows, cols) = (s[0], s[1]);
        let vv = self.value(v);
        let gv = self.value(g);
        let mut norms = vec![0.0f64; cols];
        for r in 0..rows {
            for c in 0..cols {
                norms[c] += vv[r * cols + c] * vv[r * cols + c];
            }
        }
        let norms: Vec<f64> = norms.iter().map(|n| n.sqrt().max(1e-12)).collect();
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[r * cols + c] = gv[c] * vv[r * cols + c] / norms[c];
            }
        }
        Ok(self.push(s, out, Op::WeightNorm(v, g), &[v, g]))
    }

    /// Copy of `a` cut off from the tape.
    pub fn detach(&mut self, a: Var) -> Var {
        let t = Tensor::new(self.shape(a).to_vec(), self.value(a).to_vec()).expect("node shape is consistent");
        self.leaf(t)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(a).len() {
            return shape_err("reshape", self.shape(a), shape);
        }
        let out = self.value(a).to_vec();
        Ok(self.push(shape.to_vec(), out, Op::Reshape(a), &[a]))
    }

    // ----------------------------------------------------------- backward

    /// Reverse sweep from a scalar `loss`. May be called once per graph.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            self.grads = grads;
            return Ok(());
        }
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(gout) = grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &gout, &mut grads);
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, i: usize, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let nodes = &self.nodes;
        let mut acc = |p: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[p.0].requires_grad {
                return;
            }
            let g = grads[p.0].get_or_insert_with(|| vec![0.0; nodes[p.0].value.len()]);
            f(g);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                let n = nodes[b.0].shape[1];
                let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                acc(*a, &mut |g| gemm(m, n, k, gout, false, vb, true, g, 1.0));
                acc(*b, &mut |g| gemm(k, m, n, va, true, gout, false, g, 1.0));
            }
            Op::Bmm(a, b) => {
                let sa = &nodes[a.0].shape;
                let (bs, m, k) = (sa[0], sa[1], sa[2]);
                let n = nodes[b.0].shape[2];
                let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                acc(*a, &mut |g| {
                    for t in 0..bs {
                        gemm(
                            m,
                            n,
                            k,
                            &gout[t * m * n..],
                            false,
                            &vb[t * k * n..],
                            true,
                            &mut g[t * m * k..(t + 1) * m * k],
                            1.0,
                        );
                    }
                });
                acc(*b, &mut |g| {
                    for t in 0..bs {
                        gemm(
                            k,
                            m,
                            n,
                            &va[t * m * k..],
                            true,
                            &gout[t * m * n..],
                            false,
                            &mut g[t * k * n..(t + 1) * k * n],
                            1.0,
                        );
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |g| g.iter_mut().zip(gout).for_each(|(x, d)| *x += d));
                acc(*b, &mut |g| g.iter_mut().zip(gout).for_each(|(x, d)| *x += d));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |g| g.iter_mut().zip(gout).for_each(|(x, d)| *x += d));
                acc(*b, &mut |g| g.iter_mut().zip(gout).for_each(|(x, d)| *x -= d));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                acc(*a, &mut |g| {
                    for ((x, d), y) in g.iter_mut().zip(gout).zip(vb) {
                        *x += d * y;
                    }
                });
                acc(*b, &mut |g| {
                    for ((x, d), y) in g.iter_mut().zip(gout).zip(va) {
                        *x += d * y;
                    }
                });
            }
            Op::AddRow(a, r) => {
                let n = nodes[r.0].value.len();
                acc(*a, &mut |g| g.iter_mut().zip(gout).for_each(|(x, d)| *x += d));
                acc(*r, &mut |g| {
                    for c in gout.chunks(n) {
                        g.iter_mut().zip(c).for_each(|(x, d)| *x += d);
                    }
                });
            }
            Op::Scale(a, s) => {
                acc(*a, &mut |g| g.iter_mut().zip(gout).for_each(|(x, d)| *x += d * s));
            }
            Op::AddScalar(a) => {
                acc(*a, &mut |g| g.iter_mut().zip(gout).for_each(|(x, d)| *x += d));
            }
            Op::Concat(parts) => {
                let total = last_dim(&node.shape);
                let rows = node.value.len() / total.max(1);
                let mut off = 0;
                for p in parts {
                    let w = last_dim(&nodes[p.0].shape);
                    acc(*p, &mut |g| {
                        for r in 0..rows {
                            let src = &gout[r * total + off..r * total + off + w];
                            g[r * w..(r + 1) * w]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(x, d)| *x += d);
                        }
                    });
                    off += w;
                }
            }
            Op::Slice(a, start, len) => {
                let n = last_dim(&nodes[a.0].shape);
                acc(*a, &mut |g| {
                    for (row, d) in g.chunks_mut(n).zip(gout.chunks(*len)) {
                        row[*start..start + len]
                            .iter_mut()
                            .zip(d)
                            .for_each(|(x, d)| *x += d);
                    }
                });
            }
            Op::Sum(a) => {
                let d = gout[0];
                acc(*a, &mut |g| g.iter_mut().for_each(|x| *x += d));
            }
            Op::SumRows(a) => {
                let n = last_dim(&nodes[a.0].shape);
                acc(*a, &mut |g| {
                    for (row, d) in g.chunks_mut(n).zip(gout) {
                        row.iter_mut().for_each(|x| *x += d);
                    }
                });
            }
            Op::Relu(a) => {
                let va = &nodes[a.0].value;
                acc(*a, &mut |g| {
                    for ((x, d), v) in g.iter_mut().zip(gout).zip(va) {
                        if *v > 0.0 {
                            *x += d;
                        }
                    }
                });
            }
            Op::Tanh(_) | Op::Sigmoid(_) | Op::Exp(_) => {
                let (a, y) = match &node.op {
                    Op::Tanh(a) | Op::Sigmoid(a) | Op::Exp(a) => (*a, &node.value),
                    _ => unreachable!(),
                };
                let deriv: fn(f64) -> f64 = match &node.op {
                    Op::Tanh(_) => |y| 1.0 - y * y,
                    Op::Sigmoid(_) => |y| y * (1.0 - y),
                    _ => |y| y,
                };
                acc(a, &mut |g| {
                    for ((x, d), y) in g.iter_mut().zip(gout).zip(y) {
                        *x += d * deriv(*y);
                    }
                });
            }
            Op::Softmax(a) => {
                let n = last_dim(&node.shape);
                let y = &node.value;
                acc(*a, &mut |g| {
                    for ((gr, dr), yr) in g.chunks_mut(n).zip(gout.chunks(n)).zip(y.chunks(n)) {
                        let dot: f64 = dr.iter().zip(yr).map(|(d, y)| d * y).sum();
                        for ((x, d), y) in gr.iter_mut().zip(dr).zip(yr) {
                            *x += y * (d - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax(a) => {
                let n = last_dim(&node.shape);
                let y = &node.value;
                acc(*a, &mut |g| {
                    for ((gr, dr), yr) in g.chunks_mut(n).zip(gout.chunks(n)).zip(y.chunks(n)) {
                        let total: f64 = dr.iter().sum();
                        for ((x, d), ly) in gr.iter_mut().zip(dr).zip(yr) {
                            *x += d - ly.exp() * total;
                        }
                    }
                });
            }
            Op::GatherRows(t, idx) => {
                let d = nodes[t.0].shape[1];
                acc(*t, &mut |g| {
                    for (r, &i) in idx.iter().enumerate() {
                        g[i * d..(i + 1) * d]
                            .iter_mut()
                            .zip(&gout[r * d..(r + 1) * d])
                            .for_each(|(x, d)| *x += d);
                    }
                });
            }
            Op::PickCols(a, idx) => {
                let n = nodes[a.0].shape[1];
                acc(*a, &mut |g| {
                    for (r, &c) in idx.iter().enumerate() {
                        g[r * n + c] += gout[r];
                    }
                });
            }
            Op::Dropout(a, mask) => {
                acc(*a, &mut |g| {
                    for ((x, d), m) in g.iter_mut().zip(gout).zip(mask) {
                        *x += d * m;
                    }
                });
            }
            Op::WeightNorm(v, gs) => {
                let (rows, cols) = (node.shape[0], node.shape[1]);
                let vv = &nodes[v.0].value;
                let gv = &nodes[gs.0].value;
                let mut norms = vec![0.0f64; cols];
                for r in 0..rows {
                    for c in 0..cols {
                        norms[c] += vv[r * cols + c] * vv[r * cols + c];
                    }
                }
                norms.iter_mut().for_each(|n| *n = n.sqrt().max(1e-12));
                // dot[c] = <v_hat[:, c], dW[:, c]>
                let mut dot = vec![0.0f64; cols];
                for r in 0..rows {
                    for c in 0..cols {
                        dot[c] += vv[r * cols + c] / norms[c] * gout[r * cols + c];
                    }
                }
                acc(*v, &mut |g| {
                    for r in 0..rows {
                        for c in 0..cols {
                            let vhat = vv[r * cols + c] / norms[c];
                            g[r * cols + c] += gv[c] / norms[c] * (gout[r * cols + c] - vhat * dot[c]);
                        }
                    }
                });
                acc(*gs, &mut |g| g.iter_mut().zip(&dot).for_each(|(x, d)| *x += d));
            }
            Op::Reshape(a) => {
                acc(*a, &mut |g| g.iter_mut().zip(gout).for_each(|(x, d)| *x += d));
            }
        }
    }

    /// Gradients of every bound, trainable parameter leaf (zeros when unreached).
    pub fn param_grads(&self) -> Vec<(String, Vec<f64>)> {
        self.params
            .iter()
            .filter(|(_, v)| self.nodes[v.0].requires_grad)
            .map(|(name, v)| {
                let g = self
                    .grad(*v)
                    .map(|g| g.to_vec())
                    .unwrap_or_else(|| vec![0.0; self.nodes[v.0].value.len()]);
                (name.clone(), g)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[3], &[1.0, 1.0, 1.0]));
        let y = g.softmax(x).unwrap();
        for v in g.value(y) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn relu_clamps_negatives() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[3], &[-2.0, 0.0, 3.0]));
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y), &[0.0, 0.0, 3.0]);
    }

    #[test]
    fn matmul_of_ones_counts() {
        let mut g = Graph::new();
        let a = g.leaf(t(&[2, 3], &[1.0; 6]));
        let b = g.leaf(t(&[3, 1], &[1.0; 3]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.shape(c), &[2, 1]);
        assert_eq!(g.value(c), &[3.0, 3.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.leaf(t(&[2, 3], &[1.0; 6]));
        let b = g.leaf(t(&[2, 1], &[1.0; 2]));
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]") && msg.contains("[2, 1]"), "{msg}");
    }

    #[test]
    fn square_sum_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2], &[1.0, 2.0]).with_grad());
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn log_softmax_gradient_at_zero() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[1, 2], &[0.0, 0.0]).with_grad());
        let ls = g.log_softmax(x).unwrap();
        let first = g.pick_cols(ls, &[0]).unwrap();
        let loss = g.sum(first).unwrap();
        g.backward(loss).unwrap();
        let gr = g.grad(x).unwrap();
        assert!((gr[0] - 0.5).abs() < 1e-15 && (gr[1] + 0.5).abs() < 1e-15);
    }

    #[test]
    fn fan_out_accumulates_exactly() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[], &[3.0]).with_grad());
        let y = g.add(x, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_reuse() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2], &[1.0, 2.0]).with_grad());
        let y = g.relu(x).unwrap();
        assert!(matches!(g.backward(y), Err(Error::NonScalarLoss(_))));
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(Error::TapeConsumed)));
    }

    #[test]
    fn constants_are_not_recorded() {
        let mut g = Graph::new();
        let a = g.leaf(t(&[2], &[1.0, 2.0]));
        let b = g.relu(a).unwrap();
        assert!(!g.requires_grad(b));
    }

    #[test]
    fn dropout_respects_mask_and_scale() {
        let mut g = Graph::new();
        let a = g.leaf(t(&[4], &[1.0, 2.0, 3.0, 4.0]));
        let d = g.dropout(a, &[true, false, true, false], 0.5).unwrap();
        assert_eq!(g.value(d), &[2.0, 0.0, 6.0, 0.0]);
    }
}
