//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] is an append-only list of nodes. Each operation computes its
//! value eagerly and, when any input requires a gradient, records what it
//! needs for the backward pass. [`Graph::backward`] walks the nodes once in
//! reverse execution order and deposits gradients into the leaf tensors that
//! requested them.
//!
//! Tensors are treated as matrices whose last axis is the column axis.
//! Leaves are owned copies; callers read gradients back with [`Graph::grad`].

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    /// Leaf or a value computed from non-differentiable inputs.
    Const,
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow {
        x: Var,
        bias: Var,
    },
    Scale {
        x: Var,
        factor: T,
    },
    Relu(Var),
    Gelu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        /// Normalized input x̂ and per-row reciprocal std.
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        probs: Vec<T>,
    },
    MeanPool {
        x: Var,
        seq: usize,
    },
    Sum(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    Mse {
        pred: Var,
        target: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Append-only tape of executed operations.
#[derive(Debug)]
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn acc<T: Scalar>(slot: &mut Option<Vec<T>>, len: usize) -> &mut Vec<T> {
    slot.get_or_insert_with(|| vec![T::zero(); len])
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// `(1 + tanh(u)) / 2` written as the logistic `1 / (1 + e^(-2u))`.
fn gelu_gate<T: Scalar>(v: T) -> T {
    let u = T::from_f64(2.0 * GELU_C) * (v + T::from_f64(GELU_K) * v * v * v);
    T::one() / (T::one() + (-u).exp())
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of nodes that participate in the backward pass.
    pub fn tape_len(&self) -> usize {
        self.nodes.iter().filter(|n| n.requires_grad).count()
    }

    /// Adds a leaf. Its gradient is tracked iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let requires_grad = tensor.requires_grad();
        self.push(tensor, Op::Const, requires_grad)
    }

    /// Adds a trainable leaf.
    pub fn param(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(true))
    }

    /// Adds a constant leaf.
    pub fn input(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Gradient deposited on a leaf by [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        let op = if requires_grad { op } else { Op::Const };
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

    fn matrix_dims(&self, v: Var) -> (usize, usize) {
        let t = self.value(v);
        (t.rows(), t.cols())
    }

    /// `a · b` for a: m×k, b: k×n.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` for a: m×k, b: n×k.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (m, k) = self.matrix_dims(a);
        let (br, bc) = self.matrix_dims(b);
        let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
        if self.value(a).shape().len() != 2 || self.value(b).shape().len() != 2 || k != kb {
            return Err(shape_err(
                if trans_b { "matmul_t" } else { "matmul" },
                self.value(a).shape(),
                self.value(b).shape(),
            ));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            trans_b,
            T::zero(),
            &mut out,
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Tensor::from_vec(&[m, n], out)?,
            Op::MatMul { a, b, trans_b },
            rg,
        ))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(shape_err(op, self.value(a).shape(), self.value(b).shape()));
        }
        Ok(())
    }

    fn zip_map(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::from_vec(x.shape(), data).expect("shape preserved")
    }

    fn map(&self, x: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let t = self.value(x);
        Tensor::from_vec(t.shape(), t.data().iter().map(|&v| f(v)).collect())
            .expect("shape preserved")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_map(a, b, |p, q| p + q);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_map(a, b, |p, q| p - q);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_map(a, b, |p, q| p * q);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// Adds a length-n row vector to every row of an m×n matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let cols = self.value(x).cols();
        if self.value(bias).numel() != cols {
            return Err(shape_err(
                "add_row",
                self.value(x).shape(),
                self.value(bias).shape(),
            ));
        }
        let b = self.value(bias).data().to_vec();
        let mut out = self.value(x).clone().with_requires_grad(false);
        for row in out.data_mut().chunks_mut(cols) {
            row.iter_mut().zip(&b).for_each(|(o, &v)| *o += v);
        }
        let rg = self.rg(&[x, bias]);
        Ok(self.push(out, Op::AddRow { x, bias }, rg))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let out = self.map(x, |v| v * factor);
        let rg = self.rg(&[x]);
        self.push(out, Op::Scale { x, factor }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.map(x, |v| v.max(T::zero()));
        let rg = self.rg(&[x]);
        self.push(out, Op::Relu(x), rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.map(x, |v| v * gelu_gate(v));
        let rg = self.rg(&[x]);
        self.push(out, Op::Gelu(x), rg)
    }

    /// Row-wise softmax, stabilized by subtracting the row maximum.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let cols = t.cols();
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(cols) {
            softmax_in_place(row);
        }
        let out = Tensor::from_vec(t.shape(), out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Softmax(x), rg))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let t = self.value(x);
        let cols = t.cols();
        for p in [gamma, beta] {
            if self.value(p).numel() != cols {
                return Err(shape_err("layer_norm", t.shape(), self.value(p).shape()));
            }
        }
        let eps = T::from_f64(LAYER_NORM_EPS);
        let n = T::from_f64(cols as f64);
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = Vec::with_capacity(t.numel());
        let mut rstd = Vec::with_capacity(t.rows());
        let mut out = Vec::with_capacity(t.numel());
        for row in t.data().chunks(cols) {
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let r = T::one() / (var + eps).sqrt();
            rstd.push(r);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let out = Tensor::from_vec(t.shape(), out)?;
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Gathers rows of `table` (vocab×d) for each id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (vocab, d) = (t.rows(), t.cols());
        if ids.is_empty() {
            return Err(Error::contract("embedding lookup with no ids"));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::Index {
                    what: "embedding table",
                    index: id,
                    len: vocab,
                });
            }
            out.extend_from_slice(&t.data()[id * d..(id + 1) * d]);
        }
        let out = Tensor::from_vec(&[ids.len(), d], out)?;
        let rg = self.rg(&[table]);
        Ok(self.push(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Multi-head scaled dot-product attention without masking.
    ///
    /// `q`, `k`, `v` are (batch·seq)×d with heads laid out as contiguous
    /// column blocks of width d/heads.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
    ) -> Result<Var> {
        let (rows, d) = self.matrix_dims(q);
        for other in [k, v] {
            if self.value(other).shape() != self.value(q).shape() {
                return Err(shape_err(
                    "attention",
                    self.value(q).shape(),
                    self.value(other).shape(),
                ));
            }
        }
        if rows != batch * seq || heads == 0 || d % heads != 0 {
            return Err(shape_err("attention", &[rows, d], &[batch, seq, heads]));
        }
        let dh = d / heads;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut probs = vec![T::zero(); batch * heads * seq * seq];
        let mut out = vec![T::zero(); rows * d];
        for b in 0..batch {
            for h in 0..heads {
                let p = &mut probs[(b * heads + h) * seq * seq..][..seq * seq];
                for i in 0..seq {
                    let qi = &qd[(b * seq + i) * d + h * dh..][..dh];
                    let prow = &mut p[i * seq..(i + 1) * seq];
                    for (j, pj) in prow.iter_mut().enumerate() {
                        let kj = &kd[(b * seq + j) * d + h * dh..][..dh];
                        *pj = dot(qi, kj) * scale;
                    }
                    softmax_in_place(prow);
                    let oi = &mut out[(b * seq + i) * d + h * dh..][..dh];
                    for (j, &pj) in prow.iter().enumerate() {
                        let vj = &vd[(b * seq + j) * d + h * dh..][..dh];
                        oi.iter_mut().zip(vj).for_each(|(o, &x)| *o += pj * x);
                    }
                }
            }
        }
        let out = Tensor::from_vec(&[rows, d], out)?;
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                batch,
                seq,
                heads,
                probs,
            },
            rg,
        ))
    }

    /// Averages each consecutive block of `seq` rows: (batch·seq)×d → batch×d.
    pub fn mean_pool(&mut self, x: Var, seq: usize) -> Result<Var> {
        let (rows, d) = self.matrix_dims(x);
        if seq == 0 || rows % seq != 0 {
            return Err(shape_err("mean_pool", &[rows, d], &[seq]));
        }
        let batch = rows / seq;
        let inv = T::from_f64(1.0 / seq as f64);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); batch * d];
        for (r, row) in src.chunks(d).enumerate() {
            let o = &mut out[(r / seq) * d..][..d];
            o.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
        }
        out.iter_mut().for_each(|v| *v *= inv);
        let out = Tensor::from_vec(&[batch, d], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::MeanPool { x, seq }, rg))
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Mean softmax cross-entropy of n×k logits against class labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, k) = self.matrix_dims(logits);
        if labels.len() != n {
            return Err(shape_err("cross_entropy", &[n, k], &[labels.len()]));
        }
        if n == 0 || k == 0 {
            return Err(Error::contract("cross_entropy over an empty axis"));
        }
        let src = self.value(logits).data();
        let mut probs = Vec::with_capacity(n * k);
        let mut total = 0.0f64;
        for (row, &label) in src.chunks(k).zip(labels) {
            if label >= k {
                return Err(Error::Index {
                    what: "class label",
                    index: label,
                    len: k,
                });
            }
            let (amax, max) = row
                .iter()
                .copied()
                .enumerate()
                .fold((0, T::neg_infinity()), |acc, (j, v)| {
                    if v > acc.1 {
                        (j, v)
                    } else {
                        acc
                    }
                });
            // log-sum-exp as max + ln(1 + Σ_{j≠argmax} e^{x_j - max}), which stays
            // accurate for tiny losses.
            let rest: T = row
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != amax)
                .map(|(_, &v)| (v - max).exp())
                .sum();
            total += (max - row[label] + rest.ln_1p()).as_f64();
            let denom = T::one() + rest;
            probs.extend(row.iter().map(|&v| (v - max).exp() / denom));
        }
        let loss = T::from_f64(total / n as f64);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Mean squared error against fixed targets.
    pub fn mse(&mut self, pred: Var, target: &[T]) -> Result<Var> {
        let p = self.value(pred);
        if p.numel() != target.len() {
            return Err(shape_err("mse", p.shape(), &[target.len()]));
        }
        if target.is_empty() {
            return Err(Error::contract("mse over an empty axis"));
        }
        let n = target.len() as f64;
        let total: f64 = p
            .data()
            .iter()
            .zip(target)
            .map(|(&a, &b)| (a - b).as_f64().powi(2))
            .sum();
        let rg = self.rg(&[pred]);
        Ok(self.push(
            Tensor::scalar(T::from_f64(total / n)),
            Op::Mse {
                pred,
                target: target.to_vec(),
            },
            rg,
        ))
    }

    /// Reverse pass from a scalar loss.
    ///
    /// Gradients are added into the leaves' buffers, so calling this twice
    /// without clearing them accumulates. Every node is visited at most once,
    /// in reverse execution order.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::contract("loss is not on this tape"));
        }
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            if let Op::Const = self.nodes[idx].op {
                self.nodes[idx].value.accumulate_grad(&g)?;
                continue;
            }
            self.backprop_node(idx, &g, &mut grads);
        }
        Ok(())
    }

    fn backprop_node(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Const => unreachable!(),
            Op::MatMul { a, b, trans_b } => {
                let (m, k) = self.matrix_dims(*a);
                let n = node.value.cols();
                if rg(*a) {
                    // dA = dC · B' ᵀ
                    let buf = acc(&mut grads[a.0], m * k);
                    T::gemm(m, n, k, g, false, val(*b), !*trans_b, T::one(), buf);
                }
                if rg(*b) {
                    if *trans_b {
                        // B is n×k: dB = dCᵀ · A
                        let buf = acc(&mut grads[b.0], n * k);
                        T::gemm(n, m, k, g, true, val(*a), false, T::one(), buf);
                    } else {
                        // B is k×n: dB = Aᵀ · dC
                        let buf = acc(&mut grads[b.0], k * n);
                        T::gemm(k, m, n, val(*a), true, g, false, T::one(), buf);
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if rg(v) {
                        add_into(acc(&mut grads[v.0], g.len()), g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if rg(*a) {
                    add_into(acc(&mut grads[a.0], g.len()), g);
                }
                if rg(*b) {
                    let buf = acc(&mut grads[b.0], g.len());
                    buf.iter_mut().zip(g).for_each(|(o, &v)| *o -= v);
                }
            }
            Op::Mul(a, b) => {
                for (this, other) in [(*a, *b), (*b, *a)] {
                    if rg(this) {
                        let o = val(other);
                        let buf = acc(&mut grads[this.0], g.len());
                        for ((dst, &gv), &ov) in buf.iter_mut().zip(g).zip(o) {
                            *dst += gv * ov;
                        }
                    }
                }
            }
            Op::AddRow { x, bias } => {
                if rg(*x) {
                    add_into(acc(&mut grads[x.0], g.len()), g);
                }
                if rg(*bias) {
                    let cols = node.value.cols();
                    let buf = acc(&mut grads[bias.0], cols);
                    for row in g.chunks(cols) {
                        add_into(buf, row);
                    }
                }
            }
            Op::Scale { x, factor } => {
                let buf = acc(&mut grads[x.0], g.len());
                buf.iter_mut().zip(g).for_each(|(o, &v)| *o += v * *factor);
            }
            Op::Relu(x) => {
                let xs = val(*x);
                let buf = acc(&mut grads[x.0], g.len());
                for ((o, &gv), &xv) in buf.iter_mut().zip(g).zip(xs) {
                    if xv > T::zero() {
                        *o += gv;
                    }
                }
            }
            Op::Gelu(x) => {
                let c2 = T::from_f64(2.0 * GELU_C);
                let k3 = T::from_f64(3.0 * GELU_K);
                let xs = val(*x);
                let buf = acc(&mut grads[x.0], g.len());
                for ((o, &gv), &v) in buf.iter_mut().zip(g).zip(xs) {
                    let s = gelu_gate(v);
                    let d = s + v * s * (T::one() - s) * c2 * (T::one() + k3 * v * v);
                    *o += gv * d;
                }
            }
            Op::Softmax(x) => {
                let cols = node.value.cols();
                let y = node.value.data();
                let buf = acc(&mut grads[x.0], g.len());
                for ((dst, gr), yr) in buf.chunks_mut(cols).zip(g.chunks(cols)).zip(y.chunks(cols))
                {
                    let inner = dot(gr, yr);
                    for ((o, &gv), &yv) in dst.iter_mut().zip(gr).zip(yr) {
                        *o += yv * (gv - inner);
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
                let cols = node.value.cols();
                let gam = val(*gamma);
                if rg(*gamma) {
                    let buf = acc(&mut grads[gamma.0], cols);
                    for (gr, hr) in g.chunks(cols).zip(xhat.chunks(cols)) {
                        for ((o, &gv), &h) in buf.iter_mut().zip(gr).zip(hr) {
                            *o += gv * h;
                        }
                    }
                }
                if rg(*beta) {
                    let buf = acc(&mut grads[beta.0], cols);
                    for gr in g.chunks(cols) {
                        add_into(buf, gr);
                    }
                }
                if rg(*x) {
                    let n = T::from_f64(cols as f64);
                    let buf = acc(&mut grads[x.0], g.len());
                    let rows = buf
                        .chunks_mut(cols)
                        .zip(g.chunks(cols))
                        .zip(xhat.chunks(cols))
                        .zip(rstd);
                    for (((dst, gr), hr), &r) in rows {
                        let mut mean_d = T::zero();
                        let mut mean_dh = T::zero();
                        for j in 0..cols {
                            let d = gr[j] * gam[j];
                            mean_d += d;
                            mean_dh += d * hr[j];
                        }
                        mean_d = mean_d / n;
                        mean_dh = mean_dh / n;
                        for j in 0..cols {
                            let d = gr[j] * gam[j];
                            dst[j] += r * (d - mean_d - hr[j] * mean_dh);
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let cols = node.value.cols();
                let len = self.nodes[table.0].value.numel();
                let buf = acc(&mut grads[table.0], len);
                for (&id, gr) in ids.iter().zip(g.chunks(cols)) {
                    add_into(&mut buf[id * cols..(id + 1) * cols], gr);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                batch,
                seq,
                heads,
                probs,
            } => self.attention_backward(
                (*q, *k, *v),
                (*batch, *seq, *heads),
                probs,
                g,
                grads,
            ),
            Op::MeanPool { x, seq } => {
                let cols = node.value.cols();
                let inv = T::from_f64(1.0 / *seq as f64);
                let len = self.nodes[x.0].value.numel();
                let buf = acc(&mut grads[x.0], len);
                for (r, dst) in buf.chunks_mut(cols).enumerate() {
                    let gr = &g[(r / seq) * cols..][..cols];
                    dst.iter_mut().zip(gr).for_each(|(o, &gv)| *o += gv * inv);
                }
            }
            Op::Sum(x) => {
                let len = self.nodes[x.0].value.numel();
                let buf = acc(&mut grads[x.0], len);
                buf.iter_mut().for_each(|o| *o += g[0]);
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let k = self.nodes[logits.0].value.cols();
                let scale = g[0] / T::from_f64(labels.len() as f64);
                let buf = acc(&mut grads[logits.0], probs.len());
                for (r, (&label, pr)) in labels.iter().zip(probs.chunks(k)).enumerate() {
                    for (j, &p) in pr.iter().enumerate() {
                        let onehot = if j == label { T::one() } else { T::zero() };
                        buf[r * k + j] += (p - onehot) * scale;
                    }
                }
            }
            Op::Mse { pred, target } => {
                let p = val(*pred);
                let scale = T::from_f64(2.0) * g[0] / T::from_f64(target.len() as f64);
                let buf = acc(&mut grads[pred.0], p.len());
                for ((o, &pv), &tv) in buf.iter_mut().zip(p).zip(target) {
                    *o += (pv - tv) * scale;
                }
            }
        }
    }

    fn attention_backward(
        &self,
        (q, k, v): (Var, Var, Var),
        (batch, seq, heads): (usize, usize, usize),
        probs: &[T],
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let (rows, d) = self.matrix_dims(q);
        let dh = d / heads;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let (qd, kd, vd) = (
            self.nodes[q.0].value.data(),
            self.nodes[k.0].value.data(),
            self.nodes[v.0].value.data(),
        );
        let mut dq = vec![T::zero(); rows * d];
        let mut dk = vec![T::zero(); rows * d];
        let mut dv = vec![T::zero(); rows * d];
        let mut dp = vec![T::zero(); seq];
        for b in 0..batch {
            for h in 0..heads {
                let p = &probs[(b * heads + h) * seq * seq..][..seq * seq];
                for i in 0..seq {
                    let gi = &g[(b * seq + i) * d + h * dh..][..dh];
                    let prow = &p[i * seq..(i + 1) * seq];
                    for j in 0..seq {
                        let off = (b * seq + j) * d + h * dh;
                        dp[j] = dot(gi, &vd[off..off + dh]);
                        let pij = prow[j];
                        dv[off..off + dh]
                            .iter_mut()
                            .zip(gi)
                            .for_each(|(o, &x)| *o += pij * x);
                    }
                    let inner = dot(&dp, prow);
                    let qoff = (b * seq + i) * d + h * dh;
                    for j in 0..seq {
                        let ds = prow[j] * (dp[j] - inner) * scale;
                        let koff = (b * seq + j) * d + h * dh;
                        for c in 0..dh {
                            dq[qoff + c] += ds * kd[koff + c];
                            dk[koff + c] += ds * qd[qoff + c];
                        }
                    }
                }
            }
        }
        for (var, local) in [(q, dq), (k, dk), (v, dv)] {
            if self.nodes[var.0].requires_grad {
                add_into(acc(&mut grads[var.0], local.len()), &local);
            }
        }
    }
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(o, &v)| *o += v);
}

fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v = *v / total);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor<f64> {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_identity_and_zero() {
        let mut g = Graph::<f64>::new();
        let i2 = g.input(t(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let col = g.input(t(&[&[1.0], &[2.0]]));
        let out = g.matmul(i2, col).unwrap();
        assert_eq!(g.value(out).data(), &[1.0, 2.0]);

        let a = g.input(t(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let z = g.input(t(&[&[0.0], &[0.0]]));
        let out = g.matmul(a, z).unwrap();
        assert_eq!(g.value(out).data(), &[0.0, 0.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::<f64>::new();
        let a = g.input(Tensor::zeros(&[2, 3]));
        let b = g.input(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3] vs [2, 3]"), "{msg}");
    }

    #[test]
    fn tape_records_only_differentiable_nodes() {
        let mut g = Graph::<f64>::new();
        let a = g.input(Tensor::full(&[2, 2], 1.0));
        let b = g.input(Tensor::full(&[2, 2], 1.0));
        let c = g.matmul(a, b).unwrap();
        assert!(!g.requires_grad(c));
        assert_eq!(g.tape_len(), 0);
        let w = g.param(Tensor::full(&[2, 2], 1.0));
        let _ = g.matmul(c, w).unwrap();
        assert_eq!(g.tape_len(), 2);
    }

    #[test]
    fn linear_map_gradient_is_input() {
        // loss = sum(W x) with x fixed: dW[i][j] = x[j]
        let mut g = Graph::<f64>::new();
        let w = g.param(Tensor::full(&[3, 2], 0.5));
        let x = g.input(t(&[&[2.0], &[-1.0]]));
        let y = g.matmul(w, x).unwrap();
        let loss = g.sum(y);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[2.0, -1.0, 2.0, -1.0, 2.0, -1.0]);
    }

    #[test]
    fn zero_b_annihilates_both_product_grads() {
        // loss = ||B A x||² at B = 0
        let mut g = Graph::<f64>::new();
        let a = g.param(t(&[&[0.3, -0.7, 1.1]]));
        let b = g.param(Tensor::zeros(&[3, 1]));
        let x = g.input(t(&[&[1.0], &[2.0], &[-0.5]]));
        let ax = g.matmul(a, x).unwrap();
        let bax = g.matmul(b, ax).unwrap();
        let sq = g.mul(bax, bax).unwrap();
        let loss = g.sum(sq);
        g.backward(loss).unwrap();
        assert!(g.grad(a).unwrap().iter().all(|&v| v == 0.0));
        assert!(g.grad(b).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::<f64>::new();
        let w = g.param(Tensor::zeros(&[2, 2]));
        assert!(matches!(g.backward(w), Err(Error::Contract(_))));
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut g = Graph::<f64>::new();
        let w = g.param(Tensor::full(&[2], 1.0));
        let loss = g.sum(w);
        g.backward(loss).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn softmax_symmetric() {
        let mut g = Graph::<f64>::new();
        let x = g.input(t(&[&[0.0, 0.0]]));
        let y = g.softmax(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn cross_entropy_tiny_loss() {
        // log(1 + e^-20)
        let expected = (-20.0f64).exp().ln_1p();
        assert!((expected - 2.061_153_6e-9).abs() < 1e-15);
        let mut g = Graph::<f64>::new();
        let x = g.input(t(&[&[10.0, -10.0]]));
        let loss = g.cross_entropy(x, &[0]).unwrap();
        assert!((g.value(loss).data()[0] - expected).abs() < 1e-18);

        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::from_rows(&[&[10.0, -10.0]]).unwrap());
        let loss = g.cross_entropy(x, &[0]).unwrap();
        let v = g.value(loss).data()[0] as f64;
        assert!((v - expected).abs() / expected < 1e-5, "{v}");
    }

    #[test]
    fn layer_norm_of_constant_is_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::full(&[2, 4], 3.25));
        let gamma = g.input(Tensor::full(&[4], 1.0));
        let beta = g.input(Tensor::zeros(&[4]));
        let y = g.layer_norm(x, gamma, beta).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn empty_reductions_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::zeros(&[1, 2]));
        assert!(g.mse(x, &[]).is_err());
        assert!(g.embedding(x, &[]).is_err());
    }

    #[test]
    fn out_of_vocab_is_index_error() {
        let mut g = Graph::<f64>::new();
        let table = g.input(Tensor::zeros(&[4, 2]));
        assert!(matches!(
            g.embedding(table, &[1, 4]),
            Err(Error::Index { index: 4, .. })
        ));
    }
}
