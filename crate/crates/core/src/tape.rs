//! Reverse-mode automatic differentiation over a linear operation tape.
//!
//! Every operation is evaluated eagerly and appended to the tape, so node
//! indices are a topological order: walking the tape backwards visits each
//! node after all of its consumers. Gradients are only propagated through
//! nodes that (transitively) depend on a leaf created with `requires_grad`.
//!
//! Broadcasting rule: the binary element-wise ops (`add`, `mul`) accept a
//! right operand whose shape equals the trailing dimensions of the left
//! operand; it is repeated over the leading dimensions. Any other mismatch is
//! an error.

use std::rc::Rc;

use crate::tensor::{Result, Tensor, TensorError};

const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One query/key block of a fused attention op: queries
/// `q_start..q_start + q_len` attend to keys `k_start..k_start + k_len`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionBlock {
    pub q_start: usize,
    pub q_len: usize,
    pub k_start: usize,
    pub k_len: usize,
}

#[derive(Clone, Debug)]
pub struct AttentionLayout {
    pub heads: usize,
    pub blocks: Vec<AttentionBlock>,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Exp(Var),
    Log(Var),
    Relu(Var),
    Gelu(Var),
    Softmax(Var),
    LogSoftmax(Var),
    GatherLast {
        x: Var,
        idx: Vec<usize>,
    },
    SelectRows {
        x: Var,
        rows: Vec<usize>,
    },
    Concat(Vec<Var>),
    Reshape(Var),
    Sum(Var),
    SegmentSum {
        x: Var,
        lens: Vec<usize>,
    },
    Mean(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        layout: Rc<AttentionLayout>,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.shapes[v.0].clone(), g.clone()).expect("gradient shape"))
    }

    /// Gradient of `v`, or zeros of its shape when no gradient reached it.
    pub fn get_or_zeros(&self, v: Var) -> Tensor {
        self.get(v)
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn invalid(op: &'static str, msg: impl Into<String>) -> TensorError {
    TensorError::Invalid {
        op,
        msg: msg.into(),
    }
}

/// `b` broadcasts onto `a` iff `b.shape` is a suffix of `a.shape`.
fn broadcastable(a: &Tensor, b: &Tensor) -> bool {
    let (ra, rb) = (a.rank(), b.rank());
    rb <= ra && a.shape()[ra - rb..] == *b.shape()
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let t = (C * (x + 0.044_715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044_715 * x * x)
}

/// `c (m x n) += a (m x k) * b (k x n)` with explicit row/column strides.
#[allow(clippy::too_many_arguments)]
fn gemm_acc(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    c: &mut [f64],
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    // SAFETY: the strides describe views fully inside the given slices; the
    // callers derive them from tensor shapes checked at op construction.
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
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn softmax_rows(x: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (xr, orow) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = xr.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (o, &v) in orow.iter_mut().zip(xr) {
            *o = (v - max).exp();
            z += *o;
        }
        for o in orow.iter_mut() {
            *o /= z;
        }
    }
    out
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Same value, no gradient path back to `x`.
    pub fn detach(&mut self, x: Var) -> Var {
        let v = self.value(x).clone();
        self.constant(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(mismatch("matmul", ta, tb));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm_acc(
            m,
            k,
            n,
            ta.data(),
            k as isize,
            1,
            tb.data(),
            n as isize,
            1,
            &mut out,
        );
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !broadcastable(ta, tb) {
            return Err(mismatch("add", ta, tb));
        }
        let bd = tb.data();
        let mut out = ta.data().to_vec();
        if !bd.is_empty() {
            for chunk in out.chunks_mut(bd.len()) {
                for (o, &y) in chunk.iter_mut().zip(bd) {
                    *o += y;
                }
            }
        }
        let value = Tensor::new(ta.shape().to_vec(), out)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !broadcastable(ta, tb) {
            return Err(mismatch("mul", ta, tb));
        }
        let bd = tb.data();
        let mut out = ta.data().to_vec();
        if !bd.is_empty() {
            for chunk in out.chunks_mut(bd.len()) {
                for (o, &y) in chunk.iter_mut().zip(bd) {
                    *o *= y;
                }
            }
        }
        let value = Tensor::new(ta.shape().to_vec(), out)?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|v| v * c).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Scale(x, c), &[x])
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.push(value, op, &[x])
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, f64::ln, Op::Log(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, gelu, Op::Gelu(x))
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = softmax_rows(t.data(), t.last_dim());
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Softmax(x), &[x])
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let cols = t.last_dim();
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(cols) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let value = Tensor::new(t.shape().to_vec(), out).expect("same shape");
        self.push(value, Op::LogSoftmax(x), &[x])
    }

    /// Picks `x[r, idx[r]]` from every row of the last-dimension view.
    pub fn gather_last(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let cols = t.last_dim();
        if t.rank() == 0 || idx.len() != t.rows() {
            return Err(invalid(
                "gather_last",
                format!("{} indices for shape {:?}", idx.len(), t.shape()),
            ));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= cols) {
            return Err(invalid(
                "gather_last",
                format!("index {bad} out of range for last dim {cols}"),
            ));
        }
        let data = idx
            .iter()
            .enumerate()
            .map(|(r, &i)| t.data()[r * cols + i])
            .collect();
        let shape = t.shape()[..t.rank() - 1].to_vec();
        let value = Tensor::new(shape, data)?;
        Ok(self.push(
            value,
            Op::GatherLast {
                x,
                idx: idx.to_vec(),
            },
            &[x],
        ))
    }

    /// Rows of `x` along its first dimension, repeats allowed.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if t.rank() == 0 {
            return Err(invalid("select_rows", "scalar input"));
        }
        let n = t.shape()[0];
        let width = if n == 0 { 0 } else { t.len() / n };
        let mut data = Vec::with_capacity(rows.len() * width);
        for &r in rows {
            if r >= n {
                return Err(invalid(
                    "select_rows",
                    format!("row {r} out of range for shape {:?}", t.shape()),
                ));
            }
            data.extend_from_slice(&t.data()[r * width..(r + 1) * width]);
        }
        let mut shape = t.shape().to_vec();
        shape[0] = rows.len();
        let value = Tensor::new(shape, data)?;
        Ok(self.push(
            value,
            Op::SelectRows {
                x,
                rows: rows.to_vec(),
            },
            &[x],
        ))
    }

    /// Embedding lookup: rows of a `[vocab, dim]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.select_rows(table, ids)
    }

    /// Concatenation along the first dimension; rank-0 inputs count as `[1]`.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(invalid("concat", "no inputs"));
        }
        let trailing = |t: &Tensor| -> Vec<usize> {
            if t.rank() == 0 {
                Vec::new()
            } else {
                t.shape()[1..].to_vec()
            }
        };
        let first = self.value(xs[0]);
        let tail = trailing(first);
        let mut rows = 0;
        let mut data = Vec::new();
        for &x in xs {
            let t = self.value(x);
            if trailing(t) != tail {
                return Err(mismatch("concat", first, t));
            }
            rows += if t.rank() == 0 { 1 } else { t.shape()[0] };
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Concat(xs.to_vec()), xs))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Sums consecutive segments of a rank-1 `x`; segment `i` has
    /// `lens[i]` elements and the lengths must cover `x` exactly.
    pub fn segment_sum(&mut self, x: Var, lens: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 1 || lens.iter().sum::<usize>() != t.len() {
            return Err(invalid(
                "segment_sum",
                format!("segments {lens:?} do not cover shape {:?}", t.shape()),
            ));
        }
        let mut off = 0;
        let data = lens
            .iter()
            .map(|&l| {
                let s = t.data()[off..off + l].iter().sum();
                off += l;
                s
            })
            .collect();
        let value = Tensor::vector(data);
        Ok(self.push(
            value,
            Op::SegmentSum {
                x,
                lens: lens.to_vec(),
            },
            &[x],
        ))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.is_empty() {
            return Err(invalid("mean", "empty tensor"));
        }
        let m = t.data().iter().sum::<f64>() / t.len() as f64;
        Ok(self.push(Tensor::scalar(m), Op::Mean(x), &[x]))
    }

    /// Normalizes over the last dimension, then applies `gamma * xhat + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (t, g, b) = (self.value(x), self.value(gamma), self.value(beta));
        let cols = t.last_dim();
        if g.shape() != [cols] {
            return Err(mismatch("layer_norm", t, g));
        }
        if b.shape() != [cols] {
            return Err(mismatch("layer_norm", t, b));
        }
        let rows = t.rows();
        let mut xhat = vec![0.0; t.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; t.len()];
        for r in 0..rows {
            let xr = &t.data()[r * cols..(r + 1) * cols];
            let mean = xr.iter().sum::<f64>() / cols as f64;
            let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = rs;
            for c in 0..cols {
                let h = (xr[c] - mean) * rs;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * g.data()[c] + b.data()[c];
            }
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    /// Fused multi-head scaled dot-product attention over `[n, d]` inputs.
    /// Query rows not covered by any block produce zeros.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        layout: Rc<AttentionLayout>,
    ) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        if tq.rank() != 2 || tk.rank() != 2 || tk.shape() != tv.shape() {
            return Err(mismatch("attention", tk, tv));
        }
        if tq.shape()[1] != tk.shape()[1] {
            return Err(mismatch("attention", tq, tk));
        }
        let d = tq.shape()[1];
        let heads = layout.heads;
        if heads == 0 || d % heads != 0 {
            return Err(invalid(
                "attention",
                format!("{heads} heads do not divide width {d}"),
            ));
        }
        let (nq, nk) = (tq.shape()[0], tk.shape()[0]);
        for b in &layout.blocks {
            if b.q_start + b.q_len > nq || b.k_start + b.k_len > nk || b.k_len == 0 {
                return Err(invalid("attention", format!("bad block {b:?}")));
            }
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (tq.data(), tk.data(), tv.data());
        let mut out = vec![0.0; nq * d];
        let total: usize = layout.blocks.iter().map(|b| b.q_len * b.k_len).sum();
        let mut probs = Vec::with_capacity(total * heads);
        for b in &layout.blocks {
            for h in 0..heads {
                let off = h * dh;
                let base = probs.len();
                for i in 0..b.q_len {
                    let qr = &qd[(b.q_start + i) * d + off..][..dh];
                    for j in 0..b.k_len {
                        let kr = &kd[(b.k_start + j) * d + off..][..dh];
                        let s: f64 = qr.iter().zip(kr).map(|(x, y)| x * y).sum();
                        probs.push(s * scale);
                    }
                }
                let p = softmax_rows(&probs[base..], b.k_len);
                probs[base..].copy_from_slice(&p);
                for i in 0..b.q_len {
                    let orow = &mut out[(b.q_start + i) * d + off..][..dh];
                    for j in 0..b.k_len {
                        let pij = probs[base + i * b.k_len + j];
                        let vr = &vd[(b.k_start + j) * d + off..][..dh];
                        for (o, &x) in orow.iter_mut().zip(vr) {
                            *o += pij * x;
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![nq, d], out)?;
        Ok(self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                layout,
                probs,
            },
            &[q, k, v],
        ))
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(TensorError::NonScalar(lt.shape().to_vec()));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(i, &g, &mut grads);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        // Intermediate gradients were consumed above; keep leaves only.
        for (i, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) || !node.requires_grad {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads, shapes })
    }

    fn accumulate<'g>(
        &self,
        grads: &'g mut [Option<Vec<f64>>],
        v: Var,
    ) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if let Some(ga) = self.accumulate(grads, *a) {
                    // dA = dC * B^T
                    gemm_acc(m, n, k, g, n as isize, 1, tb.data(), 1, n as isize, ga);
                }
                if let Some(gb) = self.accumulate(grads, *b) {
                    // dB = A^T * dC
                    gemm_acc(k, m, n, ta.data(), 1, k as isize, g, n as isize, 1, gb);
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = self.accumulate(grads, *a) {
                    for (d, &x) in ga.iter_mut().zip(g) {
                        *d += x;
                    }
                }
                if let Some(gb) = self.accumulate(grads, *b) {
                    let w = gb.len();
                    if w > 0 {
                        for chunk in g.chunks(w) {
                            for (d, &x) in gb.iter_mut().zip(chunk) {
                                *d += x;
                            }
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                let w = bd.len();
                if let Some(ga) = self.accumulate(grads, *a) {
                    for (idx, d) in ga.iter_mut().enumerate() {
                        *d += g[idx] * bd[idx % w];
                    }
                }
                if let Some(gb) = self.accumulate(grads, *b) {
                    for (idx, (&x, &gv)) in ad.iter().zip(g).enumerate() {
                        gb[idx % w] += gv * x;
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(gx) = self.accumulate(grads, *x) {
                    for (d, &v) in gx.iter_mut().zip(g) {
                        *d += v * c;
                    }
                }
            }
            Op::Exp(x) => {
                if let Some(gx) = self.accumulate(grads, *x) {
                    for ((d, &v), &yv) in gx.iter_mut().zip(g).zip(y) {
                        *d += v * yv;
                    }
                }
            }
            Op::Log(x) => {
                let xd = self.value(*x).data();
                if let Some(gx) = self.accumulate(grads, *x) {
                    for ((d, &v), &xv) in gx.iter_mut().zip(g).zip(xd) {
                        *d += v / xv;
                    }
                }
            }
            Op::Relu(x) => {
                let xd = self.value(*x).data();
                if let Some(gx) = self.accumulate(grads, *x) {
                    for ((d, &v), &xv) in gx.iter_mut().zip(g).zip(xd) {
                        if xv > 0.0 {
                            *d += v;
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                let xd = self.value(*x).data();
                if let Some(gx) = self.accumulate(grads, *x) {
                    for ((d, &v), &xv) in gx.iter_mut().zip(g).zip(xd) {
                        *d += v * gelu_grad(xv);
                    }
                }
            }
            Op::Softmax(x) => {
                let cols = node.value.last_dim();
                if let Some(gx) = self.accumulate(grads, *x) {
                    for ((dr, gr), yr) in gx.chunks_mut(cols).zip(g.chunks(cols)).zip(y.chunks(cols))
                    {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for ((d, &gv), &yv) in dr.iter_mut().zip(gr).zip(yr) {
                            *d += yv * (gv - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax(x) => {
                let cols = node.value.last_dim();
                if let Some(gx) = self.accumulate(grads, *x) {
                    for ((dr, gr), yr) in gx.chunks_mut(cols).zip(g.chunks(cols)).zip(y.chunks(cols))
                    {
                        let total: f64 = gr.iter().sum();
                        for ((d, &gv), &yv) in dr.iter_mut().zip(gr).zip(yr) {
                            *d += gv - yv.exp() * total;
                        }
                    }
                }
            }
            Op::GatherLast { x, idx } => {
                let cols = self.value(*x).last_dim();
                if let Some(gx) = self.accumulate(grads, *x) {
                    for (r, (&c, &gv)) in idx.iter().zip(g).enumerate() {
                        gx[r * cols + c] += gv;
                    }
                }
            }
            Op::SelectRows { x, rows } => {
                let t = self.value(*x);
                let width = if t.shape()[0] == 0 {
                    0
                } else {
                    t.len() / t.shape()[0]
                };
                if let Some(gx) = self.accumulate(grads, *x) {
                    for (k, &r) in rows.iter().enumerate() {
                        let src = &g[k * width..(k + 1) * width];
                        for (d, &v) in gx[r * width..(r + 1) * width].iter_mut().zip(src) {
                            *d += v;
                        }
                    }
                }
            }
            Op::Concat(xs) => {
                let mut off = 0;
                for &x in xs {
                    let len = self.value(x).len();
                    if let Some(gx) = self.accumulate(grads, x) {
                        for (d, &v) in gx.iter_mut().zip(&g[off..off + len]) {
                            *d += v;
                        }
                    }
                    off += len;
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = self.accumulate(grads, *x) {
                    for (d, &v) in gx.iter_mut().zip(g) {
                        *d += v;
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.accumulate(grads, *x) {
                    for d in gx.iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::SegmentSum { x, lens } => {
                if let Some(gx) = self.accumulate(grads, *x) {
                    let mut off = 0;
                    for (&l, &gv) in lens.iter().zip(g) {
                        for d in &mut gx[off..off + l] {
                            *d += gv;
                        }
                        off += l;
                    }
                }
            }
            Op::Mean(x) => {
                if let Some(gx) = self.accumulate(grads, *x) {
                    let s = g[0] / gx.len() as f64;
                    for d in gx.iter_mut() {
                        *d += s;
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let cols = node.value.last_dim();
                let gam = self.value(*gamma).data();
                if let Some(gg) = self.accumulate(grads, *gamma) {
                    for (gr, hr) in g.chunks(cols).zip(xhat.chunks(cols)) {
                        for c in 0..cols {
                            gg[c] += gr[c] * hr[c];
                        }
                    }
                }
                if let Some(gb) = self.accumulate(grads, *beta) {
                    for gr in g.chunks(cols) {
                        for c in 0..cols {
                            gb[c] += gr[c];
                        }
                    }
                }
                if let Some(gx) = self.accumulate(grads, *x) {
                    let n = cols as f64;
                    for (r, (gr, hr)) in g.chunks(cols).zip(xhat.chunks(cols)).enumerate() {
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for c in 0..cols {
                            let dh = gr[c] * gam[c];
                            mean_dh += dh;
                            mean_dh_h += dh * hr[c];
                        }
                        mean_dh /= n;
                        mean_dh_h /= n;
                        let dr = &mut gx[r * cols..(r + 1) * cols];
                        for c in 0..cols {
                            let dh = gr[c] * gam[c];
                            dr[c] += rstd[r] * (dh - mean_dh - hr[c] * mean_dh_h);
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                layout,
                probs,
            } => self.attention_backward(g, *q, *k, *v, layout, probs, grads),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &[f64],
        q: Var,
        k: Var,
        v: Var,
        layout: &AttentionLayout,
        probs: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let d = tq.shape()[1];
        let heads = layout.heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (tq.data(), tk.data(), tv.data());
        let mut dq = vec![0.0; tq.len()];
        let mut dk = vec![0.0; tk.len()];
        let mut dv = vec![0.0; tv.len()];
        let mut base = 0;
        for b in &layout.blocks {
            for h in 0..heads {
                let off = h * dh;
                let p = &probs[base..base + b.q_len * b.k_len];
                base += b.q_len * b.k_len;
                let mut ds = vec![0.0; b.k_len];
                for i in 0..b.q_len {
                    let gr = &g[(b.q_start + i) * d + off..][..dh];
                    let prow = &p[i * b.k_len..(i + 1) * b.k_len];
                    let mut dot = 0.0;
                    for j in 0..b.k_len {
                        let vr = &vd[(b.k_start + j) * d + off..][..dh];
                        let dp: f64 = gr.iter().zip(vr).map(|(x, y)| x * y).sum();
                        ds[j] = dp;
                        dot += dp * prow[j];
                        let dvr = &mut dv[(b.k_start + j) * d + off..][..dh];
                        for (o, &x) in dvr.iter_mut().zip(gr) {
                            *o += prow[j] * x;
                        }
                    }
                    for j in 0..b.k_len {
                        let s = prow[j] * (ds[j] - dot) * scale;
                        if s == 0.0 {
                            continue;
                        }
                        let qr = &qd[(b.q_start + i) * d + off..][..dh];
                        let kr = &kd[(b.k_start + j) * d + off..][..dh];
                        let dqr = &mut dq[(b.q_start + i) * d + off..][..dh];
                        for (o, &x) in dqr.iter_mut().zip(kr) {
                            *o += s * x;
                        }
                        let dkr = &mut dk[(b.k_start + j) * d + off..][..dh];
                        for (o, &x) in dkr.iter_mut().zip(qr) {
                            *o += s * x;
                        }
                    }
                }
            }
        }
        for (var, delta) in [(q, dq), (k, dk), (v, dv)] {
            if let Some(gx) = self.accumulate(grads, var) {
                for (d, x) in gx.iter_mut().zip(delta) {
                    *d += x;
                }
            }
        }
    }
}
