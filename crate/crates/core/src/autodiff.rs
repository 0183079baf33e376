//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends a node holding its forward value and the rule for
//! pushing gradients back to its inputs. Nodes are appended in evaluation
//! order, so walking the tape backwards visits every node after all of its
//! consumers.

use crate::error::{Error, Result};
use crate::tensor::{gelu, gelu_grad, gemm, layer_norm_rows, softmax_in_place, Tensor};

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
    MatMul { a: Var, b: Var, b_trans: bool },
    Add(Var, Var),
    AddRow { x: Var, row: Var },
    Mul(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Transpose(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    GatherRows { x: Var, indices: Vec<usize> },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
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

    /// Records a leaf; it is differentiated iff `t.requires_grad`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, mut t: Tensor) -> Var {
        t.requires_grad = true;
        t.grad = None;
        self.push(t, Op::Leaf)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.requires_grad = false;
        self.push(t, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the backward root with respect to `v`, once backward ran.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn push_derived(&mut self, mut value: Tensor, op: Op, inputs: &[Var]) -> Var {
        value.requires_grad = inputs.iter().any(|&v| self.requires(v));
        self.push(value, op)
    }

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match self.shape(v) {
            [m, n] => Ok((*m, *n)),
            s => Err(Error::shape(op, s, &[0, 0])),
        }
    }

    /// `a · b`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, b_trans: bool) -> Result<Var> {
        let (m, k) = self.dims2("matmul", a)?;
        let (br, bc) = self.dims2("matmul", b)?;
        let (k2, n) = if b_trans { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            b_trans,
            &mut out,
            false,
        );
        let t = Tensor::new(&[m, n], out)?;
        Ok(self.push_derived(t, Op::MatMul { a, b, b_trans }, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.value(a).add(self.value(b))?;
        Ok(self.push_derived(t, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.value(a).mul(self.value(b))?;
        Ok(self.push_derived(t, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let t = self.value(x).scale(s);
        self.push_derived(t, Op::Scale(x, s), &[x])
    }

    /// Adds a constant tensor (masks, fixed encodings); no gradient flows to it.
    pub fn add_const(&mut self, x: Var, c: &Tensor) -> Result<Var> {
        let t = self.value(x).add(c)?;
        Ok(self.push_derived(t, Op::AddConst(x), &[x]))
    }

    /// Adds `row` (length = columns of `x`) to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let cols = self.value(x).cols();
        if self.value(row).len() != cols {
            return Err(Error::shape("add_row", self.shape(x), self.shape(row)));
        }
        let r = self.value(row).data().to_vec();
        let mut t = self.value(x).clone();
        t.grad = None;
        for chunk in t.data_mut().chunks_mut(cols) {
            for (v, b) in chunk.iter_mut().zip(&r) {
                *v += b;
            }
        }
        Ok(self.push_derived(t, Op::AddRow { x, row }, &[x, row]))
    }

    /// Affine map `x · w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_row(xw, b)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).transpose()?;
        Ok(self.push_derived(t, Op::Transpose(x), &[x]))
    }

    /// Softmax over the last axis.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let mut t = self.value(x).clone();
        t.grad = None;
        let cols = t.cols();
        for chunk in t.data_mut().chunks_mut(cols) {
            softmax_in_place(chunk);
        }
        self.push_derived(t, Op::SoftmaxRows(x), &[x])
    }

    /// Layer norm over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let cols = self.value(x).cols();
        if cols < 2 {
            return Err(Error::shape("layer_norm", self.shape(x), &[2]));
        }
        if self.value(gain).len() != cols || self.value(bias).len() != cols {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gain)));
        }
        let (out, xhat, inv_std) = layer_norm_rows(
            self.value(x).data(),
            cols,
            self.value(gain).data(),
            self.value(bias).data(),
        );
        let t = Tensor::new(self.shape(x), out)?;
        Ok(self.push_derived(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        ))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(gelu);
        self.push_derived(t, Op::Gelu(x), &[x])
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::shape("concat_rows", &[], &[]))?;
        let cols = self.value(first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.cols() != cols {
                return Err(Error::shape("concat_rows", self.shape(first), self.shape(p)));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let t = Tensor::new(&[rows, cols], data)?;
        Ok(self.push_derived(t, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Joins matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::shape("concat_cols", &[], &[]))?;
        let rows = self.value(first).rows();
        let mut total = 0;
        for &p in parts {
            if self.value(p).rows() != rows {
                return Err(Error::shape("concat_cols", self.shape(first), self.shape(p)));
            }
            total += self.value(p).cols();
        }
        let mut data = vec![0.0; rows * total];
        let mut offset = 0;
        for &p in parts {
            let v = self.value(p);
            let c = v.cols();
            for r in 0..rows {
                data[r * total + offset..r * total + offset + c].copy_from_slice(v.row(r));
            }
            offset += c;
        }
        let t = Tensor::new(&[rows, total], data)?;
        Ok(self.push_derived(t, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Columns `start..start + width` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let v = self.value(x);
        let cols = v.cols();
        if start + width > cols || width == 0 {
            return Err(Error::Index {
                op: "slice_cols",
                index: start + width,
                bound: cols,
            });
        }
        let rows = v.rows();
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            data.extend_from_slice(&v.row(r)[start..start + width]);
        }
        let t = Tensor::new(&[rows, width], data)?;
        Ok(self.push_derived(t, Op::SliceCols { x, start }, &[x]))
    }

    /// Selects rows by index (repeats allowed); backward scatter-adds.
    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let v = self.value(x);
        let (rows, cols) = (v.rows(), v.cols());
        if indices.is_empty() {
            return Err(Error::shape("gather_rows", v.shape(), &[0]));
        }
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            if i >= rows {
                return Err(Error::Index {
                    op: "gather_rows",
                    index: i,
                    bound: rows,
                });
            }
            data.extend_from_slice(v.row(i));
        }
        let t = Tensor::new(&[indices.len(), cols], data)?;
        Ok(self.push_derived(
            t,
            Op::GatherRows {
                x,
                indices: indices.to_vec(),
            },
            &[x],
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        Ok(self.push_derived(t, Op::Reshape(x), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let t = Tensor::scalar(self.value(x).sum());
        self.push_derived(t, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = Tensor::scalar(self.value(x).mean());
        self.push_derived(t, Op::Mean(x), &[x])
    }

    /// Column means as a `1 x cols` matrix.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let (rows, cols) = (v.rows(), v.cols());
        let mut out = vec![0.0; cols];
        for r in 0..rows {
            for (o, x) in out.iter_mut().zip(v.row(r)) {
                *o += x;
            }
        }
        out.iter_mut().for_each(|o| *o /= rows as f64);
        let t = Tensor::new(&[1, cols], out).unwrap();
        self.push_derived(t, Op::MeanRows(x), &[x])
    }

    /// Mean negative log softmax probability of `labels`, one per row of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let v = self.value(logits);
        let loss = crate::tensor::cross_entropy(v, labels)?;
        let cols = v.cols();
        let mut probs = v.data().to_vec();
        for chunk in probs.chunks_mut(cols) {
            softmax_in_place(chunk);
        }
        Ok(self.push_derived(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Runs reverse accumulation from a scalar root. Every node that requires
    /// a gradient and influences `root` ends up with `grad` set.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        if self.value(root).len() != 1 {
            return Err(Error::NonScalarRoot(self.shape(root).to_vec()));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);

        for i in (0..=root.0).rev() {
            if !self.nodes[i].value.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.propagate(i, &g, &mut grads);
            self.nodes[i].value.grad = Some(g);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, b_trans } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = out.shape()[1];
                if self.requires(*a) {
                    // g (m x n) · op(b)ᵀ
                    let ga = slot(grads, *a, m * k);
                    gemm(m, n, k, g, false, bv.data(), !*b_trans, ga, true);
                }
                if self.requires(*b) {
                    let gb = slot(grads, *b, k * n);
                    if *b_trans {
                        // gᵀ (n x m) · a (m x k)
                        gemm(n, m, k, g, true, av.data(), false, gb, true);
                    } else {
                        gemm(k, m, n, av.data(), true, g, false, gb, true);
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.requires(v) {
                        add_into(slot(grads, v, g.len()), g);
                    }
                }
            }
            Op::AddRow { x, row } => {
                if self.requires(*x) {
                    add_into(slot(grads, *x, g.len()), g);
                }
                if self.requires(*row) {
                    let cols = out.cols();
                    let gr = slot(grads, *row, cols);
                    for chunk in g.chunks(cols) {
                        add_into(gr, chunk);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.requires(*a) {
                    let ga = slot(grads, *a, g.len());
                    for j in 0..g.len() {
                        ga[j] += g[j] * bv[j];
                    }
                }
                if self.requires(*b) {
                    let gb = slot(grads, *b, g.len());
                    for j in 0..g.len() {
                        gb[j] += g[j] * av[j];
                    }
                }
            }
            Op::Scale(x, s) => {
                let gx = slot(grads, *x, g.len());
                for j in 0..g.len() {
                    gx[j] += g[j] * s;
                }
            }
            Op::AddConst(x) | Op::Reshape(x) => add_into(slot(grads, *x, g.len()), g),
            Op::Transpose(x) => {
                let (m, n) = (out.shape()[0], out.shape()[1]);
                let gx = slot(grads, *x, g.len());
                for r in 0..m {
                    for c in 0..n {
                        gx[c * m + r] += g[r * n + c];
                    }
                }
            }
            Op::SoftmaxRows(x) => {
                let cols = out.cols();
                let y = out.data();
                let gx = slot(grads, *x, g.len());
                for r in 0..y.len() / cols {
                    let span = r * cols..(r + 1) * cols;
                    let dot: f64 = g[span.clone()].iter().zip(&y[span.clone()]).map(|(a, b)| a * b).sum();
                    for j in span {
                        gx[j] += y[j] * (g[j] - dot);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let cols = out.cols();
                let gain_v = self.value(*gain).data();
                if self.requires(*gain) {
                    let gg = slot(grads, *gain, cols);
                    for (j, (gj, h)) in g.iter().zip(xhat).enumerate() {
                        gg[j % cols] += gj * h;
                    }
                }
                if self.requires(*bias) {
                    let gb = slot(grads, *bias, cols);
                    for chunk in g.chunks(cols) {
                        add_into(gb, chunk);
                    }
                }
                if self.requires(*x) {
                    let gx = slot(grads, *x, g.len());
                    let n = cols as f64;
                    let mut dh = vec![0.0; cols];
                    for (r, is) in inv_std.iter().enumerate() {
                        let span = r * cols..(r + 1) * cols;
                        let h = &xhat[span.clone()];
                        for c in 0..cols {
                            dh[c] = g[r * cols + c] * gain_v[c];
                        }
                        let sum_dh: f64 = dh.iter().sum();
                        let sum_dh_h: f64 = dh.iter().zip(h).map(|(a, b)| a * b).sum();
                        for c in 0..cols {
                            gx[r * cols + c] += is / n * (n * dh[c] - sum_dh - h[c] * sum_dh_h);
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                let gx = slot(grads, *x, g.len());
                for j in 0..g.len() {
                    gx[j] += g[j] * gelu_grad(xv[j]);
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if self.requires(p) {
                        add_into(slot(grads, p, n), &g[offset..offset + n]);
                    }
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let rows = out.rows();
                let mut offset = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    if self.requires(p) {
                        let gp = slot(grads, p, rows * c);
                        for r in 0..rows {
                            add_into(
                                &mut gp[r * c..(r + 1) * c],
                                &g[r * total + offset..r * total + offset + c],
                            );
                        }
                    }
                    offset += c;
                }
            }
            Op::SliceCols { x, start } => {
                let width = out.cols();
                let cols = self.value(*x).cols();
                let gx = slot(grads, *x, self.value(*x).len());
                for (r, chunk) in g.chunks(width).enumerate() {
                    add_into(&mut gx[r * cols + start..r * cols + start + width], chunk);
                }
            }
            Op::GatherRows { x, indices } => {
                let cols = out.cols();
                let gx = slot(grads, *x, self.value(*x).len());
                for (chunk, &i) in g.chunks(cols).zip(indices) {
                    add_into(&mut gx[i * cols..(i + 1) * cols], chunk);
                }
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                slot(grads, *x, n).iter_mut().for_each(|v| *v += g[0]);
            }
            Op::Mean(x) => {
                let n = self.value(*x).len();
                let share = g[0] / n as f64;
                slot(grads, *x, n).iter_mut().for_each(|v| *v += share);
            }
            Op::MeanRows(x) => {
                let xv = self.value(*x);
                let share = 1.0 / xv.rows() as f64;
                let cols = xv.cols();
                let gx = slot(grads, *x, xv.len());
                for chunk in gx.chunks_mut(cols) {
                    for (v, gj) in chunk.iter_mut().zip(g) {
                        *v += gj * share;
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let cols = self.value(*logits).cols();
                let scale = g[0] / labels.len() as f64;
                let gl = slot(grads, *logits, probs.len());
                for (r, &label) in labels.iter().enumerate() {
                    for c in 0..cols {
                        let onehot = if c == label { 1.0 } else { 0.0 };
                        gl[r * cols + c] += scale * (probs[r * cols + c] - onehot);
                    }
                }
            }
        }
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
