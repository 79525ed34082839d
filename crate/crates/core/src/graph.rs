//! Eager reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is a tape: every operation evaluates immediately, appends a
//! node holding its output and enough context for the backward rule, and
//! returns a [`Var`] handle. [`Graph::backward`] walks the tape in reverse and
//! accumulates gradients into every node that depends on a leaf created with
//! `requires_grad`.
//!
//! Vectors are rank-1 tensors; "row-wise" operations treat a rank-1 tensor as
//! a single row.

use rand::Rng;

use crate::scalar::Scalar;
use crate::tensor::{matmul_acc, matmul_nt_acc, matmul_tn_acc, Result, Tensor, TensorError};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<F> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulScalar(Var, Var),
    Scale(Var, F),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Gelu(Var),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Outer(Var, Var),
    RowOuter(Var, Var),
    Concat { parts: Vec<Var>, axis: usize },
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    Max(Var, usize),
    MeanRows(Var),
    MaxRows(Var, Vec<usize>),
    Softmax(Var),
    LogSoftmax(Var),
    FrobeniusSq(Var),
    Dropout(Var, Vec<F>),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<F>,
        inv_std: Vec<F>,
    },
    Gather(Var, Vec<usize>),
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    needs_grad: bool,
}

/// The recording tape. Single-threaded; build one per forward/backward pass.
pub struct Graph<F> {
    nodes: Vec<Node<F>>,
    grads: Vec<Option<Vec<F>>>,
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

const LN_EPS: f64 = 1e-5;

fn dim_err<T>(op: &'static str, a: &[usize], b: &[usize]) -> Result<T> {
    Err(TensorError::Dimension {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    })
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, needs_grad: bool) -> Var {
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

    /// Records a leaf. Gradients are kept only when `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> F {
        self.nodes[v.0].value.data()[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Gradient from the latest [`Graph::backward`], if the node received one.
    pub fn grad(&self, v: Var) -> Option<Tensor<F>> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(
            Tensor::new(self.nodes[v.0].value.shape().to_vec(), g.clone())
                .expect("gradient shape matches value"),
        )
    }

    fn unary(&mut self, a: Var, op: Op<F>, f: impl Fn(F) -> F) -> Var {
        let value = self.value(a).map(f);
        let ng = self.ng(a);
        self.push(value, op, ng)
    }

    fn zip(&mut self, name: &'static str, a: Var, b: Var, op: Op<F>, f: impl Fn(F, F) -> F) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return dim_err(name, ta.shape(), tb.shape());
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Adds a length-`n` vector to every row of an `m×n` matrix (or to a vector).
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (_, n) = ta.dims2();
        if tb.len() != n || ta.rank() > 2 {
            return dim_err("add_row", ta.shape(), tb.shape());
        }
        let mut value = ta.clone();
        for (i, x) in value.data_mut().iter_mut().enumerate() {
            *x += tb.data()[i % n];
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::AddRow(a, b), ng))
    }

    /// Multiplies every element by a one-element node.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return dim_err("mul_scalar", self.shape(a), self.shape(s));
        }
        let k = self.scalar(s);
        let value = self.value(a).map(|x| x * k);
        let ng = self.ng(a) || self.ng(s);
        Ok(self.push(value, Op::MulScalar(a, s), ng))
    }

    pub fn scale(&mut self, a: Var, c: F) -> Var {
        self.unary(a, Op::Scale(a, c), |x| x * c)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), F::tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), F::exp)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log(a), F::ln)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Gelu(a), gelu)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::MatMul(a, b), ng))
    }

    /// `a · bᵀ` for `a: [m×k]`, `b: [n×k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[1] {
            return dim_err("matmul_nt", ta.shape(), tb.shape());
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[0]);
        let mut out = vec![F::zero(); m * n];
        matmul_nt_acc(ta.data(), tb.data(), &mut out, m, k, n);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulNt(a, b), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.rank() != 2 {
            return Err(TensorError::Contract {
                op: "transpose",
                msg: format!("needs a matrix, got shape {:?}", ta.shape()),
            });
        }
        let value = ta.transpose();
        let ng = self.ng(a);
        Ok(self.push(value, Op::Transpose(a), ng))
    }

    /// Outer product of two vectors: `[m] ⊗ [n] → [m×n]`.
    pub fn outer(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 1 || tb.rank() != 1 {
            return dim_err("outer", ta.shape(), tb.shape());
        }
        let (m, n) = (ta.len(), tb.len());
        let mut out = Vec::with_capacity(m * n);
        for &x in ta.data() {
            out.extend(tb.data().iter().map(|&y| x * y));
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::Outer(a, b), ng))
    }

    /// Row-wise flattened outer products: row `t` of the `[N × p·q]` result is
    /// `vec(a_t ⊗ b_t)` in row-major order.
    pub fn row_outer(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let ((na, p), (nb, q)) = (ta.dims2(), tb.dims2());
        if na != nb || ta.rank() > 2 || tb.rank() > 2 {
            return dim_err("row_outer", ta.shape(), tb.shape());
        }
        let mut out = Vec::with_capacity(na * p * q);
        for t in 0..na {
            let (ra, rb) = (ta.row(t), tb.row(t));
            for &x in ra {
                out.extend(rb.iter().map(|&y| x * y));
            }
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(vec![na, p * q], out)?, Op::RowOuter(a, b), ng))
    }

    /// Concatenates vectors end to end (`axis = 0`), matrices by rows
    /// (`axis = 0`) or by columns (`axis = 1`).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(TensorError::Contract {
                op: "concat",
                msg: "no inputs".into(),
            });
        };
        let rank = self.value(first).rank();
        let value = match (rank, axis) {
            (1, 0) => {
                let mut data = Vec::new();
                for &p in parts {
                    let t = self.value(p);
                    if t.rank() != 1 {
                        return dim_err("concat", self.shape(first), t.shape());
                    }
                    data.extend_from_slice(t.data());
                }
                Tensor::vector(data)
            }
            (2, 0) => {
                let c = self.shape(first)[1];
                let mut data = Vec::new();
                let mut rows = 0;
                for &p in parts {
                    let t = self.value(p);
                    if t.rank() != 2 || t.shape()[1] != c {
                        return dim_err("concat", self.shape(first), t.shape());
                    }
                    rows += t.shape()[0];
                    data.extend_from_slice(t.data());
                }
                Tensor::new(vec![rows, c], data)?
            }
            (2, 1) => {
                let r = self.shape(first)[0];
                let mut cols = 0;
                for &p in parts {
                    let t = self.value(p);
                    if t.rank() != 2 || t.shape()[0] != r {
                        return dim_err("concat", self.shape(first), t.shape());
                    }
                    cols += t.shape()[1];
                }
                let mut data = Vec::with_capacity(r * cols);
                for i in 0..r {
                    for &p in parts {
                        data.extend_from_slice(self.value(p).row(i));
                    }
                }
                Tensor::new(vec![r, cols], data)?
            }
            _ => {
                return Err(TensorError::Contract {
                    op: "concat",
                    msg: format!("axis {axis} unsupported for rank {rank}"),
                })
            }
        };
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            ng,
        ))
    }

    /// Rows `start..end` of a matrix, or elements of a vector.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let ta = self.value(a);
        let value = match ta.rank() {
            1 if start <= end && end <= ta.len() => Tensor::vector(ta.data()[start..end].to_vec()),
            2 if start <= end && end <= ta.shape()[0] => {
                let c = ta.shape()[1];
                Tensor::new(vec![end - start, c], ta.data()[start * c..end * c].to_vec())?
            }
            _ => return dim_err("slice_rows", ta.shape(), &[start, end]),
        };
        let ng = self.ng(a);
        Ok(self.push(value, Op::SliceRows(a, start), ng))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let ta = self.value(a);
        if ta.rank() != 2 || start > end || end > ta.shape()[1] {
            return dim_err("slice_cols", ta.shape(), &[start, end]);
        }
        let r = ta.shape()[0];
        let mut data = Vec::with_capacity(r * (end - start));
        for i in 0..r {
            data.extend_from_slice(&ta.row(i)[start..end]);
        }
        let value = Tensor::new(vec![r, end - start], data)?;
        let ng = self.ng(a);
        Ok(self.push(value, Op::SliceCols(a, start), ng))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        let ng = self.ng(a);
        Ok(self.push(value, Op::Reshape(a), ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.sum() / F::lit(t.len().max(1) as f64);
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Mean(a), ng)
    }

    /// Maximum element; the gradient flows to the first maximizer.
    pub fn max(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(TensorError::Contract {
                op: "max",
                msg: "empty tensor".into(),
            });
        }
        let i = t.argmax();
        let m = t.data()[i];
        let ng = self.ng(a);
        Ok(self.push(Tensor::scalar(m), Op::Max(a, i), ng))
    }

    /// Column means of an `N×D` matrix.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = t.dims2();
        if r == 0 {
            return dim_err("mean_rows", t.shape(), &[]);
        }
        let inv = F::one() / F::lit(r as f64);
        let mut out = vec![F::zero(); c];
        for i in 0..r {
            for (o, &x) in out.iter_mut().zip(t.row(i)) {
                *o += x;
            }
        }
        out.iter_mut().for_each(|o| *o *= inv);
        let ng = self.ng(a);
        Ok(self.push(Tensor::vector(out), Op::MeanRows(a), ng))
    }

    /// Column maxima of an `N×D` matrix.
    pub fn max_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = t.dims2();
        if r == 0 {
            return dim_err("max_rows", t.shape(), &[]);
        }
        let mut arg = vec![0usize; c];
        let mut out = t.row(0).to_vec();
        for i in 1..r {
            for (j, &x) in t.row(i).iter().enumerate() {
                if x > out[j] {
                    out[j] = x;
                    arg[j] = i;
                }
            }
        }
        let ng = self.ng(a);
        Ok(self.push(Tensor::vector(out), Op::MaxRows(a, arg), ng))
    }

    /// Softmax over the last axis, with max-subtraction.
    pub fn softmax(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        let (r, c) = value.dims2();
        for i in 0..r {
            softmax_in_place(&mut value.data_mut()[i * c..(i + 1) * c]);
        }
        let ng = self.ng(a);
        self.push(value, Op::Softmax(a), ng)
    }

    /// Log-softmax over the last axis, computed as `x - logsumexp(x)`.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        let (r, c) = value.dims2();
        for i in 0..r {
            let row = &mut value.data_mut()[i * c..(i + 1) * c];
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|x| *x -= lse);
        }
        let ng = self.ng(a);
        self.push(value, Op::LogSoftmax(a), ng)
    }

    pub fn frobenius_sq(&mut self, a: Var) -> Var {
        let s = self.value(a).frobenius_sq();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::FrobeniusSq(a), ng)
    }

    /// Applies a precomputed mask (already scaled by `1/(1-p)`).
    pub fn apply_mask(&mut self, a: Var, mask: Vec<F>) -> Result<Var> {
        let ta = self.value(a);
        if mask.len() != ta.len() {
            return dim_err("apply_mask", ta.shape(), &[mask.len()]);
        }
        let data = ta.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let ng = self.ng(a);
        Ok(self.push(value, Op::Dropout(a, mask), ng))
    }

    /// Inverted dropout. `p == 0` records nothing and returns `a`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, p: f64, rng: &mut R) -> Result<Var> {
        if p <= 0.0 {
            return Ok(a);
        }
        if p >= 1.0 {
            return Err(TensorError::Contract {
                op: "dropout",
                msg: format!("probability {p} must be below 1"),
            });
        }
        let keep = F::lit(1.0 / (1.0 - p));
        let mask = (0..self.value(a).len())
            .map(|_| if rng.gen::<f64>() < p { F::zero() } else { keep })
            .collect();
        self.apply_mask(a, mask)
    }

    /// Row-wise layer normalization with learned gain and bias (`[D]` each).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let tx = self.value(x);
        let (r, d) = tx.dims2();
        if self.value(gamma).len() != d || self.value(beta).len() != d {
            return dim_err("layer_norm", tx.shape(), self.shape(gamma));
        }
        let eps = F::lit(LN_EPS);
        let dn = F::lit(d as f64);
        let mut xhat = vec![F::zero(); r * d];
        let mut inv_std = vec![F::zero(); r];
        for i in 0..r {
            let row = tx.row(i);
            let mu = row.iter().copied().sum::<F>() / dn;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<F>() / dn;
            let is = F::one() / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..d {
                xhat[i * d + j] = (row[j] - mu) * is;
            }
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let data = xhat
            .iter()
            .enumerate()
            .map(|(k, &h)| g[k % d] * h + b[k % d])
            .collect();
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            ng,
        ))
    }

    /// Selects rows `ids` of a matrix (embedding lookup / row selection).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.rank() != 2 {
            return dim_err("gather_rows", t.shape(), &[ids.len()]);
        }
        let (v, d) = (t.shape()[0], t.shape()[1]);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            if i >= v {
                return Err(TensorError::Contract {
                    op: "gather_rows",
                    msg: format!("row {i} out of range for {v} rows"),
                });
            }
            data.extend_from_slice(t.row(i));
        }
        let value = Tensor::new(vec![ids.len(), d], data)?;
        let ng = self.ng(table);
        Ok(self.push(value, Op::Gather(table, ids.to_vec()), ng))
    }

    /// Reverse pass from a one-element `loss`. Replaces gradients from any
    /// earlier call.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let n_out = self.value(loss).len();
        if n_out != 1 {
            return Err(TensorError::Contract {
                op: "backward",
                msg: format!("loss must be a scalar, got shape {:?}", self.shape(loss)),
            });
        }
        let mut grads: Vec<Option<Vec<F>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![F::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].needs_grad {
                self.backprop_node(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        for (i, g) in grads.iter_mut().enumerate() {
            if !self.nodes[i].needs_grad {
                *g = None;
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let nodes = &self.nodes;
        let out = &nodes[i].value;
        let val = |v: Var| &nodes[v.0].value;
        // Lazily allocate the input's gradient buffer and hand it to `f`.
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [F])| {
            if !nodes[v.0].needs_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![F::zero(); nodes[v.0].value.len()]);
            f(buf);
        };
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(x, &y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a).data(), val(*b).data());
                acc(*a, &mut |ga| {
                    for k in 0..g.len() {
                        ga[k] += g[k] * vb[k];
                    }
                });
                acc(*b, &mut |gb| {
                    for k in 0..g.len() {
                        gb[k] += g[k] * va[k];
                    }
                });
            }
            Op::AddRow(a, b) => {
                let n = val(*b).len();
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| {
                    for (k, &x) in g.iter().enumerate() {
                        gb[k % n] += x;
                    }
                });
            }
            Op::MulScalar(a, s) => {
                let k = val(*s).data()[0];
                let va = val(*a).data();
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y * k));
                acc(*s, &mut |gs| gs[0] += g.iter().zip(va).map(|(&y, &x)| y * x).sum());
            }
            Op::Scale(a, c) => acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y * *c)),
            Op::Tanh(a) => acc(*a, &mut |ga| {
                for ((x, &y), &o) in ga.iter_mut().zip(g).zip(out.data()) {
                    *x += y * (F::one() - o * o);
                }
            }),
            Op::Sigmoid(a) => acc(*a, &mut |ga| {
                for ((x, &y), &o) in ga.iter_mut().zip(g).zip(out.data()) {
                    *x += y * o * (F::one() - o);
                }
            }),
            Op::Exp(a) => acc(*a, &mut |ga| {
                for ((x, &y), &o) in ga.iter_mut().zip(g).zip(out.data()) {
                    *x += y * o;
                }
            }),
            Op::Log(a) => {
                let va = val(*a).data();
                acc(*a, &mut |ga| {
                    for ((x, &y), &v) in ga.iter_mut().zip(g).zip(va) {
                        *x += y / v;
                    }
                })
            }
            Op::Gelu(a) => {
                let va = val(*a).data();
                acc(*a, &mut |ga| {
                    for ((x, &y), &v) in ga.iter_mut().zip(g).zip(va) {
                        *x += y * gelu_grad(v);
                    }
                })
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                acc(*a, &mut |ga| matmul_nt_acc(g, tb.data(), ga, m, n, k));
                acc(*b, &mut |gb| matmul_tn_acc(ta.data(), g, gb, m, k, n));
            }
            Op::MatMulNt(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[0]);
                acc(*a, &mut |ga| matmul_acc(g, tb.data(), ga, m, n, k));
                acc(*b, &mut |gb| matmul_tn_acc(g, ta.data(), gb, m, n, k));
            }
            Op::Transpose(a) => {
                let (r, c) = val(*a).dims2();
                acc(*a, &mut |ga| {
                    for p in 0..r {
                        for q in 0..c {
                            ga[p * c + q] += g[q * r + p];
                        }
                    }
                })
            }
            Op::Outer(a, b) => {
                let (va, vb) = (val(*a).data(), val(*b).data());
                let n = vb.len();
                acc(*a, &mut |ga| {
                    for (p, x) in ga.iter_mut().enumerate() {
                        *x += (0..n).map(|q| g[p * n + q] * vb[q]).sum();
                    }
                });
                acc(*b, &mut |gb| {
                    for (q, x) in gb.iter_mut().enumerate() {
                        *x += va.iter().enumerate().map(|(p, &av)| g[p * n + q] * av).sum();
                    }
                });
            }
            Op::RowOuter(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let ((rows, p), (_, q)) = (ta.dims2(), tb.dims2());
                let w = p * q;
                acc(*a, &mut |ga| {
                    for t in 0..rows {
                        let rb = tb.row(t);
                        for i in 0..p {
                            let gs = &g[t * w + i * q..t * w + (i + 1) * q];
                            ga[t * p + i] += gs.iter().zip(rb).map(|(&x, &y)| x * y).sum();
                        }
                    }
                });
                acc(*b, &mut |gb| {
                    for t in 0..rows {
                        let ra = ta.row(t);
                        for (i, &av) in ra.iter().enumerate() {
                            let gs = &g[t * w + i * q..t * w + (i + 1) * q];
                            for j in 0..q {
                                gb[t * q + j] += gs[j] * av;
                            }
                        }
                    }
                });
            }
            Op::Concat { parts, axis } => {
                if out.rank() == 2 && *axis == 1 {
                    let (r, c) = out.dims2();
                    let mut off = 0;
                    for &p in parts {
                        let pc = val(p).shape()[1];
                        acc(p, &mut |gp| {
                            for row in 0..r {
                                add_into(
                                    &mut gp[row * pc..(row + 1) * pc],
                                    &g[row * c + off..row * c + off + pc],
                                );
                            }
                        });
                        off += pc;
                    }
                } else {
                    let mut off = 0;
                    for &p in parts {
                        let len = val(p).len();
                        acc(p, &mut |gp| add_into(gp, &g[off..off + len]));
                        off += len;
                    }
                }
            }
            Op::SliceRows(a, start) => {
                let (_, c) = val(*a).dims2();
                let c = if val(*a).rank() == 1 { 1 } else { c };
                let off = start * c;
                acc(*a, &mut |ga| add_into(&mut ga[off..off + g.len()], g));
            }
            Op::SliceCols(a, start) => {
                let (r, c) = val(*a).dims2();
                let w = out.dims2().1;
                acc(*a, &mut |ga| {
                    for row in 0..r {
                        add_into(
                            &mut ga[row * c + start..row * c + start + w],
                            &g[row * w..(row + 1) * w],
                        );
                    }
                });
            }
            Op::Reshape(a) => acc(*a, &mut |ga| add_into(ga, g)),
            Op::Sum(a) => acc(*a, &mut |ga| ga.iter_mut().for_each(|x| *x += g[0])),
            Op::Mean(a) => {
                let k = g[0] / F::lit(val(*a).len().max(1) as f64);
                acc(*a, &mut |ga| ga.iter_mut().for_each(|x| *x += k));
            }
            Op::Max(a, idx) => acc(*a, &mut |ga| ga[*idx] += g[0]),
            Op::MeanRows(a) => {
                let (r, c) = val(*a).dims2();
                let inv = F::one() / F::lit(r as f64);
                acc(*a, &mut |ga| {
                    for (k, x) in ga.iter_mut().enumerate() {
                        *x += g[k % c] * inv;
                    }
                });
            }
            Op::MaxRows(a, arg) => {
                let c = val(*a).dims2().1;
                acc(*a, &mut |ga| {
                    for (j, &row) in arg.iter().enumerate() {
                        ga[row * c + j] += g[j];
                    }
                });
            }
            Op::Softmax(a) => {
                let (r, c) = out.dims2();
                acc(*a, &mut |ga| {
                    for row in 0..r {
                        let y = &out.data()[row * c..(row + 1) * c];
                        let gy = &g[row * c..(row + 1) * c];
                        let dot: F = y.iter().zip(gy).map(|(&p, &q)| p * q).sum();
                        for j in 0..c {
                            ga[row * c + j] += y[j] * (gy[j] - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax(a) => {
                let (r, c) = out.dims2();
                acc(*a, &mut |ga| {
                    for row in 0..r {
                        let y = &out.data()[row * c..(row + 1) * c];
                        let gy = &g[row * c..(row + 1) * c];
                        let total: F = gy.iter().copied().sum();
                        for j in 0..c {
                            ga[row * c + j] += gy[j] - y[j].exp() * total;
                        }
                    }
                });
            }
            Op::FrobeniusSq(a) => {
                let va = val(*a).data();
                let k = g[0] + g[0];
                acc(*a, &mut |ga| ga.iter_mut().zip(va).for_each(|(x, &v)| *x += k * v));
            }
            Op::Dropout(a, mask) => acc(*a, &mut |ga| {
                for ((x, &y), &m) in ga.iter_mut().zip(g).zip(mask) {
                    *x += y * m;
                }
            }),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (r, d) = out.dims2();
                let gam = val(*gamma).data();
                acc(*gamma, &mut |gg| {
                    for (k, (&y, &h)) in g.iter().zip(xhat).enumerate() {
                        gg[k % d] += y * h;
                    }
                });
                acc(*beta, &mut |gb| {
                    for (k, &y) in g.iter().enumerate() {
                        gb[k % d] += y;
                    }
                });
                let dn = F::lit(d as f64);
                acc(*x, &mut |gx| {
                    for row in 0..r {
                        let base = row * d;
                        let mut s1 = F::zero();
                        let mut s2 = F::zero();
                        for j in 0..d {
                            let dh = g[base + j] * gam[j];
                            s1 += dh;
                            s2 += dh * xhat[base + j];
                        }
                        let k = inv_std[row] / dn;
                        for j in 0..d {
                            let dh = g[base + j] * gam[j];
                            gx[base + j] += k * (dn * dh - s1 - xhat[base + j] * s2);
                        }
                    }
                });
            }
            Op::Gather(table, ids) => {
                let d = val(*table).shape()[1];
                acc(*table, &mut |gt| {
                    for (t, &id) in ids.iter().enumerate() {
                        add_into(&mut gt[id * d..(id + 1) * d], &g[t * d..(t + 1) * d]);
                    }
                });
            }
        }
    }
}

fn add_into<F: Scalar>(dst: &mut [F], src: &[F]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
}

pub fn sigmoid<F: Scalar>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub fn gelu<F: Scalar>(x: F) -> F {
    let inner = F::lit(GELU_C) * (x + F::lit(GELU_A) * x * x * x);
    F::lit(0.5) * x * (F::one() + inner.tanh())
}

fn gelu_grad<F: Scalar>(x: F) -> F {
    let c = F::lit(GELU_C);
    let a = F::lit(GELU_A);
    let t = (c * (x + a * x * x * x)).tanh();
    let half = F::lit(0.5);
    half * (F::one() + t) + half * x * (F::one() - t * t) * c * (F::one() + F::lit(3.0) * a * x * x)
}

/// Numerically stable in-place softmax of one row.
pub fn softmax_in_place<F: Scalar>(row: &mut [F]) {
    let m = row.iter().copied().fold(F::neg_infinity(), F::max);
    let mut total = F::zero();
    for x in row.iter_mut() {
        *x = (*x - m).exp();
        total += *x;
    }
    row.iter_mut().for_each(|x| *x /= total);
}

pub fn log_sum_exp<F: Scalar>(row: &[F]) -> F {
    let m = row.iter().copied().fold(F::neg_infinity(), F::max);
    if m == F::neg_infinity() {
        return m;
    }
    m + row.iter().map(|&x| (x - m).exp()).sum::<F>().ln()
}
