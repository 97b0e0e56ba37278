use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::sync::Arc;

use super::Tensor;
use crate::error::{Error, Result};
use crate::sparse::CsrMatrix;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    MatMul(Var, Var),
    SparseMatMul(Arc<CsrMatrix>, Var),
    Chebyshev {
        mat: Arc<CsrMatrix>,
        x: Var,
        theta: Var,
        bias: Var,
        order: usize,
        /// `[rows, order * f]`, row-major `T_p x` blocks.
        basis: Vec<f64>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Concat(Vec<Var>),
    Reshape(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Softmax(Var),
    Log(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    Mean(Var),
    AbsSum(Var),
    SquareSum(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records a forward computation so that [`Tape::backward`] can replay it
/// in reverse. Nodes are appended in evaluation order, which is a
/// topological order by construction.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A differentiable input (parameter).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// An input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out);
        let needs = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new([m, n], out)?, Op::MatMul(a, b), needs))
    }

    /// Sparse `n x n` matrix applied to every `[n, f]` block of `x`, whose
    /// shape is `[..., n, f]`.
    pub fn sparse_matmul(&mut self, m: &Arc<CsrMatrix>, x: Var) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        if shape.len() < 2 || shape[shape.len() - 2] != m.cols() || m.rows() != m.cols() {
            return Err(Error::shape(
                "sparse_matmul",
                format!("{}x{} sparse times {shape:?}", m.rows(), m.cols()),
            ));
        }
        let f = shape[shape.len() - 1];
        let block = m.cols() * f;
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for (dst, s) in out.chunks_mut(block).zip(src.chunks(block)) {
            m.mul_dense_into(s, f, dst);
        }
        let needs = self.ng(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::SparseMatMul(Arc::clone(m), x), needs))
    }

    /// Chebyshev filter bank on `x: [..., n, f]`: `sum_p T_p x theta_p + bias`
    /// with `T_0 x = x`, `T_1 x = M x`, `T_p x = 2 M T_{p-1} x - T_{p-2} x`.
    /// `theta` is `[order * f, out]`; row `p * f + i` weights feature `i`
    /// of `T_p x`. `bias` is `[out]`.
    pub fn chebyshev_filter(&mut self, m: &Arc<CsrMatrix>, x: Var, theta: Var, bias: Var, order: usize) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        let (st, sb) = (self.value(theta).shape(), self.value(bias).shape());
        let ok_x = shape.len() >= 2 && shape[shape.len() - 2] == m.rows() && m.rows() == m.cols();
        let f = *shape.last().unwrap_or(&0);
        if order == 0 || !ok_x || st.len() != 2 || st[0] != order * f || sb != [st[1]] {
            return Err(Error::shape(
                "chebyshev_filter",
                format!("{}x{} operator, x {shape:?}, theta {st:?}, bias {sb:?}, order {order}", m.rows(), m.cols()),
            ));
        }
        let out_f = st[1];
        let k = order * f;
        let rows = self.value(x).len() / f;
        let terms = chebyshev_terms(m, self.value(x).data(), f, order);
        let mut basis = Vec::with_capacity(rows * k);
        for r in 0..rows {
            for t in &terms {
                basis.extend_from_slice(&t[r * f..(r + 1) * f]);
            }
        }
        let mut out = Vec::with_capacity(rows * out_f);
        for _ in 0..rows {
            out.extend_from_slice(self.value(bias).data());
        }
        gemm(rows, k, out_f, &basis, false, self.value(theta).data(), false, &mut out);
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = out_f;
        let needs = self.ng(x) || self.ng(theta) || self.ng(bias);
        let op = Op::Chebyshev {
            mat: Arc::clone(m),
            x,
            theta,
            bias,
            order,
            basis,
        };
        Ok(self.push(Tensor::new(out_shape, out)?, op, needs))
    }

    fn zip_same(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(op, format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("add", a, b, |x, y| x + y)?;
        let needs = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Add(a, b), needs))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("sub", a, b, |x, y| x - y)?;
        let needs = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Sub(a, b), needs))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("mul", a, b, |x, y| x * y)?;
        let needs = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Mul(a, b), needs))
    }

    /// Adds a `[f]` vector to every row of `x: [..., f]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let f = tx.last_dim();
        if tb.shape() != [f] {
            return Err(Error::shape("add_bias", format!("{:?} + {:?}", tx.shape(), tb.shape())));
        }
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(f) {
            row.iter_mut().zip(tb.data()).for_each(|(d, b)| *d += b);
        }
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        let needs = self.ng(x) || self.ng(bias);
        Ok(self.push(t, Op::AddBias(x, bias), needs))
    }

    fn map(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let tx = self.value(x);
        let data = tx.data().iter().map(|&v| f(v)).collect();
        let t = Tensor::new(tx.shape().to_vec(), data).expect("same shape");
        let needs = self.ng(x);
        self.push(t, op, needs)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.map(x, Op::Scale(x, c), |v| c * v)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.map(x, Op::AddScalar(x), |v| v + c)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, Op::Relu(x), |v| if v > 0.0 { v } else { 0.0 })
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.map(x, Op::LeakyRelu(x, slope), |v| if v > 0.0 { v } else { slope * v })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.map(x, Op::Log(x), f64::ln)
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.map(x, Op::Clamp(x, lo, hi), |v| v.clamp(lo, hi))
    }

    pub fn softmax_last_axis(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let f = tx.last_dim();
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(f) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            row.iter_mut().for_each(|v| *v /= total);
        }
        let t = Tensor::new(tx.shape().to_vec(), data).expect("same shape");
        let needs = self.ng(x);
        self.push(t, Op::Softmax(x), needs)
    }

    /// Concatenates along the last axis; all leading axes must agree.
    pub fn concat_last_axis(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::shape("concat_last_axis", "no inputs"));
        };
        let lead = {
            let s = self.value(first).shape();
            s[..s.len() - 1].to_vec()
        };
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.value(p).shape();
            if s[..s.len() - 1] != lead[..] {
                return Err(Error::shape(
                    "concat_last_axis",
                    format!("{:?} vs {:?}", self.value(first).shape(), s),
                ));
            }
            widths.push(s[s.len() - 1]);
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let needs = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(Tensor::new(shape, data)?, Op::Concat(parts.to_vec()), needs))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape)?;
        let needs = self.ng(x);
        Ok(self.push(t, Op::Reshape(x), needs))
    }

    fn reduce(&mut self, x: Var, op: Op, f: impl Fn(&[f64]) -> f64) -> Var {
        let v = f(self.value(x).data());
        let needs = self.ng(x);
        self.push(Tensor::scalar(v), op, needs)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        self.reduce(x, Op::Sum(x), |d| d.iter().sum())
    }

    pub fn mean(&mut self, x: Var) -> Var {
        self.reduce(x, Op::Mean(x), |d| d.iter().sum::<f64>() / d.len() as f64)
    }

    pub fn abs_sum(&mut self, x: Var) -> Var {
        self.reduce(x, Op::AbsSum(x), |d| d.iter().map(|v| v.abs()).sum())
    }

    pub fn square_sum(&mut self, x: Var) -> Var {
        self.reduce(x, Op::SquareSum(x), |d| d.iter().map(|v| v * v).sum())
    }

    /// Hash of the side of every kink (relu, leaky relu, abs, clamp) that
    /// the recorded forward pass landed on. Two evaluations with equal
    /// signatures lie on the same smooth piece of the function.
    pub fn kink_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            let (x, lo, hi) = match &node.op {
                Op::Relu(x) | Op::LeakyRelu(x, _) | Op::AbsSum(x) => (*x, 0.0, 0.0),
                Op::Clamp(x, lo, hi) => (*x, *lo, *hi),
                _ => continue,
            };
            for &v in self.value(x).data() {
                ((v < lo) as u8 + 2 * (v > hi) as u8).hash(&mut h);
            }
        }
        h.finish()
    }

    /// Reverse pass from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_val = self.value(root);
        if root_val.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("root must be scalar, got shape {:?}", root_val.shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                }
                Op::Constant => {}
                Op::MatMul(a, b) => {
                    let (sa, sb) = (self.value(*a).shape(), self.value(*b).shape());
                    let (m, k, n) = (sa[0], sa[1], sb[1]);
                    if self.ng(*a) {
                        let bv = self.value(*b).data();
                        self.acc(&mut grads, *a, |da| gemm(m, n, k, &g, false, bv, true, da));
                    }
                    if self.ng(*b) {
                        let av = self.value(*a).data();
                        self.acc(&mut grads, *b, |db| gemm(k, m, n, av, true, &g, false, db));
                    }
                }
                Op::SparseMatMul(mat, x) => {
                    let f = node.value.last_dim();
                    let block = mat.cols() * f;
                    self.acc(&mut grads, *x, |dx| {
                        for (d, s) in dx.chunks_mut(block).zip(g.chunks(block)) {
                            mat.mul_dense_transposed_acc(s, f, d);
                        }
                    });
                }
                Op::Chebyshev {
                    mat,
                    x,
                    theta,
                    bias,
                    order,
                    basis,
                } => {
                    let out_f = node.value.last_dim();
                    let f = self.value(*x).last_dim();
                    let k = order * f;
                    let rows = g.len() / out_f;
                    self.acc(&mut grads, *theta, |dt| gemm(k, rows, out_f, basis, true, &g, false, dt));
                    self.acc(&mut grads, *bias, |db| {
                        for row in g.chunks(out_f) {
                            db.iter_mut().zip(row).for_each(|(d, r)| *d += r);
                        }
                    });
                    if self.ng(*x) {
                        let mut dbasis = vec![0.0; rows * k];
                        gemm(rows, out_f, k, &g, false, self.value(*theta).data(), true, &mut dbasis);
                        let dx = chebyshev_terms_backward(mat, &dbasis, f, *order);
                        self.acc_map(&mut grads, *x, &dx, |gi, _| gi);
                    }
                }
                Op::Add(a, b) => {
                    self.acc_map(&mut grads, *a, &g, |gi, _| gi);
                    self.acc_map(&mut grads, *b, &g, |gi, _| gi);
                }
                Op::Sub(a, b) => {
                    self.acc_map(&mut grads, *a, &g, |gi, _| gi);
                    self.acc_map(&mut grads, *b, &g, |gi, _| -gi);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                    self.acc_map(&mut grads, *a, &g, |gi, j| gi * bv[j]);
                    self.acc_map(&mut grads, *b, &g, |gi, j| gi * av[j]);
                }
                Op::AddBias(x, b) => {
                    self.acc_map(&mut grads, *x, &g, |gi, _| gi);
                    let f = self.value(*b).len();
                    self.acc(&mut grads, *b, |db| {
                        for row in g.chunks(f) {
                            db.iter_mut().zip(row).for_each(|(d, r)| *d += r);
                        }
                    });
                }
                Op::Scale(x, c) => self.acc_map(&mut grads, *x, &g, |gi, _| c * gi),
                Op::AddScalar(x) | Op::Reshape(x) => self.acc_map(&mut grads, *x, &g, |gi, _| gi),
                Op::Concat(parts) => {
                    let total = node.value.last_dim();
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.value(p).last_dim();
                        self.acc(&mut grads, p, |dp| {
                            for (r, row) in dp.chunks_mut(w).enumerate() {
                                let src = &g[r * total + offset..r * total + offset + w];
                                row.iter_mut().zip(src).for_each(|(d, s)| *d += s);
                            }
                        });
                        offset += w;
                    }
                }
                Op::Relu(x) => {
                    let xv = self.value(*x).data();
                    self.acc_map(&mut grads, *x, &g, |gi, j| if xv[j] > 0.0 { gi } else { 0.0 });
                }
                Op::LeakyRelu(x, slope) => {
                    let xv = self.value(*x).data();
                    self.acc_map(&mut grads, *x, &g, |gi, j| if xv[j] > 0.0 { gi } else { slope * gi });
                }
                Op::Sigmoid(x) => {
                    let y = node.value.data();
                    self.acc_map(&mut grads, *x, &g, |gi, j| gi * y[j] * (1.0 - y[j]));
                }
                Op::Log(x) => {
                    let xv = self.value(*x).data();
                    self.acc_map(&mut grads, *x, &g, |gi, j| gi / xv[j]);
                }
                Op::Clamp(x, lo, hi) => {
                    let xv = self.value(*x).data();
                    self.acc_map(&mut grads, *x, &g, |gi, j| {
                        if xv[j] >= *lo && xv[j] <= *hi {
                            gi
                        } else {
                            0.0
                        }
                    });
                }
                Op::Softmax(x) => {
                    let f = node.value.last_dim();
                    let y = node.value.data();
                    self.acc(&mut grads, *x, |dx| {
                        for ((d, yr), gr) in dx.chunks_mut(f).zip(y.chunks(f)).zip(g.chunks(f)) {
                            let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                            for ((dj, yj), gj) in d.iter_mut().zip(yr).zip(gr) {
                                *dj += yj * (gj - dot);
                            }
                        }
                    });
                }
                Op::Sum(x) => self.acc_map(&mut grads, *x, &g, |_, _| g[0]),
                Op::Mean(x) => {
                    let n = self.value(*x).len() as f64;
                    self.acc_map(&mut grads, *x, &g, |_, _| g[0] / n);
                }
                Op::AbsSum(x) => {
                    let xv = self.value(*x).data();
                    self.acc_map(&mut grads, *x, &g, |_, j| {
                        let v = xv[j];
                        if v > 0.0 {
                            g[0]
                        } else if v < 0.0 {
                            -g[0]
                        } else {
                            0.0
                        }
                    });
                }
                Op::SquareSum(x) => {
                    let xv = self.value(*x).data();
                    self.acc_map(&mut grads, *x, &g, |_, j| 2.0 * xv[j] * g[0]);
                }
            }
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| match (g, &node.op) {
                (Some(g), Op::Leaf) => Some(Tensor::new(node.value.shape().to_vec(), g).expect("shape")),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.ng(v) {
            return;
        }
        let buf = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
        f(buf);
    }

    /// `grad[v][j] += h(g[j'], j)` elementwise where `g` may be a scalar
    /// broadcast (reductions) or match `v` in length.
    fn acc_map(&self, grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64], h: impl Fn(f64, usize) -> f64) {
        self.acc(grads, v, |d| {
            if g.len() == d.len() {
                for (j, (dj, gj)) in d.iter_mut().zip(g).enumerate() {
                    *dj += h(*gj, j);
                }
            } else {
                for (j, dj) in d.iter_mut().enumerate() {
                    *dj += h(g[0], j);
                }
            }
        });
    }
}

/// Gradients of a scalar root with respect to every leaf.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of `v`, or `None` when the root does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, zero-filled when the root does not depend on it.
    pub fn get_or_zeros(&self, tape: &Tape, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape().to_vec()))
    }
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// `c += op(a) * op(b)` with row-major storage, `op(a): m x k`,
/// `op(b): k x n`.
#[allow(clippy::too_many_arguments)]
/// `[T_0 x, ..., T_{order-1} x]`, each laid out like `x`.
fn chebyshev_terms(m: &CsrMatrix, x: &[f64], f: usize, order: usize) -> Vec<Vec<f64>> {
    let block = m.cols() * f;
    let apply = |src: &[f64]| {
        let mut dst = vec![0.0; src.len()];
        for (d, s) in dst.chunks_mut(block).zip(src.chunks(block)) {
            m.mul_dense_into(s, f, d);
        }
        dst
    };
    let mut terms = Vec::with_capacity(order);
    terms.push(x.to_vec());
    if order > 1 {
        terms.push(apply(x));
    }
    for p in 2..order {
        let mut next = apply(&terms[p - 1]);
        next.iter_mut().zip(&terms[p - 2]).for_each(|(v, prev)| *v = 2.0 * *v - prev);
        terms.push(next);
    }
    terms
}

/// Adjoint of [`chebyshev_terms`] followed by basis packing: maps the
/// gradient of the packed `[rows, order * f]` basis to the gradient of `x`.
fn chebyshev_terms_backward(m: &CsrMatrix, dbasis: &[f64], f: usize, order: usize) -> Vec<f64> {
    let k = order * f;
    let rows = dbasis.len() / k;
    let block = m.cols() * f;
    let mut dt: Vec<Vec<f64>> = (0..order)
        .map(|p| {
            let mut v = Vec::with_capacity(rows * f);
            for r in 0..rows {
                v.extend_from_slice(&dbasis[r * k + p * f..r * k + (p + 1) * f]);
            }
            v
        })
        .collect();
    let apply_t = |src: &[f64]| {
        let mut dst = vec![0.0; src.len()];
        for (d, s) in dst.chunks_mut(block).zip(src.chunks(block)) {
            m.mul_dense_transposed_acc(s, f, d);
        }
        dst
    };
    for p in (2..order).rev() {
        let (lo, hi) = dt.split_at_mut(p);
        let dp = &hi[0];
        let back = apply_t(dp);
        lo[p - 1].iter_mut().zip(&back).for_each(|(d, b)| *d += 2.0 * b);
        lo[p - 2].iter_mut().zip(dp).for_each(|(d, b)| *d -= b);
    }
    if order > 1 {
        let back = apply_t(&dt[1]);
        dt[0].iter_mut().zip(&back).for_each(|(d, b)| *d += b);
    }
    dt.swap_remove(0)
}

fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the strides describe exactly the slices checked above.
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
