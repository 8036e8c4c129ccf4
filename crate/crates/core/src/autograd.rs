//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every primitive applied during a forward pass. Node
//! values are either owned or borrowed from a [`ParamStore`], so registering
//! a parameter costs nothing until it is actually used. Nodes are appended
//! in evaluation order, which makes the tape topologically sorted by
//! construction; [`Tape::backward`] walks it once in reverse.

use std::borrow::Cow;
use std::cell::Cell;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{
    ensure_finite, gelu_grad_scalar, gelu_scalar, matmul_at_raw, matmul_bt_raw, matmul_raw,
    softmax_rows_raw, transpose_raw, Tensor,
};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Leaf { param: Option<ParamId> },
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    ScaleRows(Var, Var),
    Gelu(Var),
    SoftmaxRows(Var),
    MeanRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Mse(Var, Var),
    PerTokenMse(Var, Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Reshape(Var),
    GatherRows { x: Var, idx: Vec<usize> },
    IndexAddRows { base: Var, src: Var, idx: Vec<usize> },
    GatherElements { x: Var, rows: Vec<usize>, cols: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
    Sum(Var),
}

struct Node<'p> {
    shape: Vec<usize>,
    value: Cow<'p, [f64]>,
    op: Op,
    requires_grad: bool,
}

/// Which backward rule to sabotage; used only to prove the gradient checker
/// notices a broken rule.
#[doc(hidden)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CorruptRule {
    MatMul,
    Gelu,
    SoftmaxRows,
    LayerNorm,
}

thread_local! {
    static CORRUPT: Cell<Option<CorruptRule>> = const { Cell::new(None) };
}

/// Runs `f` with one backward rule scaled by 1.5 on the current thread.
#[doc(hidden)]
pub fn with_corrupted_backward<R>(rule: CorruptRule, f: impl FnOnce() -> R) -> R {
    let prev = CORRUPT.with(|c| c.replace(Some(rule)));
    let out = f();
    CORRUPT.with(|c| c.set(prev));
    out
}

fn corruption(rule: CorruptRule) -> f64 {
    if CORRUPT.with(Cell::get) == Some(rule) {
        1.5
    } else {
        1.0
    }
}

pub struct Tape<'p> {
    store: Option<&'p ParamStore>,
    nodes: Vec<Node<'p>>,
    consumed: bool,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Tape<'p> {
    /// A tape with no parameter store; leaves come from [`Tape::leaf`].
    pub fn new() -> Self {
        Self {
            store: None,
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn with_params(store: &'p ParamStore) -> Self {
        Self {
            store: Some(store),
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.to_vec()).expect("tape values are valid")
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn rows_cols(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::invalid(format!(
                "{op}: expected a matrix, got shape {s:?}"
            ))),
        }
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, value: Vec<f64>, name: &'static str) -> Result<Var> {
        ensure_finite(name, &value)?;
        let requires_grad = self.op_requires_grad(&op);
        self.nodes.push(Node {
            shape,
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn op_requires_grad(&self, op: &Op) -> bool {
        let rg = |v: &Var| self.nodes[v.0].requires_grad;
        match op {
            Op::Leaf { .. } => false,
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => rg(a) || rg(b),
            Op::AddBias(a, b) | Op::ScaleRows(a, b) | Op::Mse(a, b) | Op::PerTokenMse(a, b) => {
                rg(a) || rg(b)
            }
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::Gelu(a)
            | Op::SoftmaxRows(a)
            | Op::MeanRows(a)
            | Op::Reshape(a)
            | Op::Sum(a) => rg(a),
            Op::LayerNorm { x, gamma, beta, .. } => rg(x) || rg(gamma) || rg(beta),
            Op::Concat { inputs, .. } => inputs.iter().any(rg),
            Op::GatherRows { x, .. } | Op::GatherElements { x, .. } => rg(x),
            Op::IndexAddRows { base, src, .. } => rg(base) || rg(src),
            Op::CrossEntropy { logits, .. } => rg(logits),
        }
    }

    // ---- leaves -------------------------------------------------------

    /// Records a leaf; gradients are tracked when `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let requires_grad = t.requires_grad();
        let shape = t.shape().to_vec();
        self.nodes.push(Node {
            shape,
            value: Cow::Owned(t.into_data()),
            op: Op::Leaf { param: None },
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    /// Borrows a stored parameter. Frozen parameters become constants.
    pub fn param(&mut self, id: ParamId) -> Var {
        let store = self.store.expect("tape has no parameter store");
        let t = store.get(id);
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: Cow::Borrowed(t.data()),
            op: Op::Leaf { param: Some(id) },
            requires_grad: t.requires_grad(),
        });
        Var(self.nodes.len() - 1)
    }

    // ---- primitives ---------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.rows_cols(a, "matmul")?;
        let (k2, n) = self.rows_cols(b, "matmul")?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let out = matmul_raw(self.value(a), self.value(b), m, k, n);
        self.push(Op::MatMul(a, b), vec![m, n], out, "matmul")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.rows_cols(a, "transpose")?;
        let out = transpose_raw(self.value(a), r, c);
        self.push(Op::Transpose(a), vec![c, r], out, "transpose")
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op,
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, name: &'static str, f: fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(a, b, name)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(op, shape, out, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Sub(a, b), "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Mul(a, b), "mul", |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).iter().map(|x| x * c).collect();
        let shape = self.shape(a).to_vec();
        self.push(Op::Scale(a, c), shape, out, "scale")
    }

    /// `x[n×d] + b` with `b` holding `d` values, added to every row.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (_, d) = self.rows_cols(x, "add_bias")?;
        if self.value(b).len() != d {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                left: self.shape(x).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let bias = self.value(b);
        let out = self
            .value(x)
            .chunks(d)
            .flat_map(|row| row.iter().zip(bias).map(|(v, b)| v + b))
            .collect();
        let shape = self.shape(x).to_vec();
        self.push(Op::AddBias(x, b), shape, out, "add_bias")
    }

    /// Multiplies row `j` of `x[k×d]` by `s[j]` where `s` is `k×1`.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (k, d) = self.rows_cols(x, "scale_rows")?;
        if self.value(s).len() != k {
            return Err(Error::ShapeMismatch {
                op: "scale_rows",
                left: self.shape(x).to_vec(),
                right: self.shape(s).to_vec(),
            });
        }
        let sv = self.value(s);
        let out = self
            .value(x)
            .chunks(d)
            .zip(sv)
            .flat_map(|(row, &c)| row.iter().map(move |v| v * c))
            .collect();
        let shape = self.shape(x).to_vec();
        self.push(Op::ScaleRows(x, s), shape, out, "scale_rows")
    }

    /// Exact GELU, `x·Φ(x)`.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).iter().map(|&x| gelu_scalar(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(Op::Gelu(a), shape, out, "gelu")
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (_, c) = self.rows_cols(a, "softmax_rows")?;
        let out = softmax_rows_raw(self.value(a), c);
        let shape = self.shape(a).to_vec();
        self.push(Op::SoftmaxRows(a), shape, out, "softmax_rows")
    }

    /// Column-wise mean, `p×q → 1×q`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (p, q) = self.rows_cols(a, "mean_rows")?;
        let mut out = vec![0.0; q];
        for row in self.value(a).chunks(q) {
            out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
        }
        out.iter_mut().for_each(|o| *o /= p as f64);
        self.push(Op::MeanRows(a), vec![1, q], out, "mean_rows")
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` of width `d`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (_, d) = self.rows_cols(x, "layer_norm")?;
        if self.value(gamma).len() != d || self.value(beta).len() != d {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                left: self.shape(x).to_vec(),
                right: self.shape(gamma).to_vec(),
            });
        }
        let (g, b) = (self.value(gamma), self.value(beta));
        let mut xhat = Vec::with_capacity(self.value(x).len());
        let mut inv_std = Vec::new();
        let mut out = Vec::with_capacity(xhat.capacity());
        for row in self.value(x).chunks(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(is);
            for (j, v) in row.iter().enumerate() {
                let h = (v - mean) * is;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let shape = self.shape(x).to_vec();
        self.push(
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            shape,
            out,
            "layer_norm",
        )
    }

    /// Mean squared error over all elements, as a `[1]` scalar.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.same_shape(pred, target, "mse")?;
        let n = self.value(pred).len() as f64;
        let s: f64 = self
            .value(pred)
            .iter()
            .zip(self.value(target))
            .map(|(p, t)| (p - t) * (p - t))
            .sum();
        self.push(Op::Mse(pred, target), vec![1], vec![s / n], "mse")
    }

    /// Row-wise mean squared error, `m×D → [m]`.
    pub fn per_token_mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.same_shape(pred, target, "per_token_mse")?;
        let (m, d) = self.rows_cols(pred, "per_token_mse")?;
        let out = self
            .value(pred)
            .chunks(d)
            .zip(self.value(target).chunks(d))
            .map(|(p, t)| p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / d as f64)
            .collect();
        self.push(Op::PerTokenMse(pred, target), vec![m], out, "per_token_mse")
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::invalid("concat: no inputs"))?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(Error::invalid(format!(
                "concat: axis {axis} out of range for rank {}",
                base.len()
            )));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    left: base,
                    right: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let chunk = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.value(v)[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        self.push(
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            shape,
            out,
            "concat",
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(a).len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                left: self.shape(a).to_vec(),
                right: shape.to_vec(),
            });
        }
        let out = self.value(a).to_vec();
        self.push(Op::Reshape(a), shape.to_vec(), out, "reshape")
    }

    /// Selects rows `idx` of `x[n×d]` into a `idx.len()×d` matrix.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (n, d) = self.rows_cols(x, "gather_rows")?;
        if idx.is_empty() {
            return Err(Error::invalid("gather_rows: empty index"));
        }
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            if i >= n {
                return Err(Error::IndexOutOfRange {
                    op: "gather_rows",
                    index: i,
                    extent: n,
                });
            }
            out.extend_from_slice(&self.value(x)[i * d..(i + 1) * d]);
        }
        self.push(
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            vec![idx.len(), d],
            out,
            "gather_rows",
        )
    }

    /// Returns `base` with `src[j]` added onto row `idx[j]`.
    pub fn index_add_rows(&mut self, base: Var, src: Var, idx: &[usize]) -> Result<Var> {
        let (n, d) = self.rows_cols(base, "index_add_rows")?;
        let (k, d2) = self.rows_cols(src, "index_add_rows")?;
        if d != d2 || k != idx.len() {
            return Err(Error::ShapeMismatch {
                op: "index_add_rows",
                left: self.shape(base).to_vec(),
                right: self.shape(src).to_vec(),
            });
        }
        let mut out = self.value(base).to_vec();
        for (j, &i) in idx.iter().enumerate() {
            if i >= n {
                return Err(Error::IndexOutOfRange {
                    op: "index_add_rows",
                    index: i,
                    extent: n,
                });
            }
            let s = &self.value(src)[j * d..(j + 1) * d];
            out[i * d..(i + 1) * d]
                .iter_mut()
                .zip(s)
                .for_each(|(o, v)| *o += v);
        }
        self.push(
            Op::IndexAddRows {
                base,
                src,
                idx: idx.to_vec(),
            },
            vec![n, d],
            out,
            "index_add_rows",
        )
    }

    /// Picks `x[rows[j], cols[j]]` into a `k×1` column.
    pub fn gather_elements(&mut self, x: Var, rows: &[usize], cols: &[usize]) -> Result<Var> {
        let (n, e) = self.rows_cols(x, "gather_elements")?;
        if rows.len() != cols.len() || rows.is_empty() {
            return Err(Error::invalid("gather_elements: index lists must be equal and non-empty"));
        }
        let mut out = Vec::with_capacity(rows.len());
        for (&r, &c) in rows.iter().zip(cols) {
            if r >= n || c >= e {
                return Err(Error::IndexOutOfRange {
                    op: "gather_elements",
                    index: if r >= n { r } else { c },
                    extent: if r >= n { n } else { e },
                });
            }
            out.push(self.value(x)[r * e + c]);
        }
        self.push(
            Op::GatherElements {
                x,
                rows: rows.to_vec(),
                cols: cols.to_vec(),
            },
            vec![rows.len(), 1],
            out,
            "gather_elements",
        )
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of `logits[L×V]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (l, v) = self.rows_cols(logits, "cross_entropy")?;
        if targets.len() != l {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                left: self.shape(logits).to_vec(),
                right: vec![targets.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::IndexOutOfRange {
                op: "cross_entropy",
                index: bad,
                extent: v,
            });
        }
        let x = self.value(logits);
        let mut loss = 0.0;
        for (row, &t) in x.chunks(v).zip(targets) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
            loss += lse - row[t];
        }
        let probs = softmax_rows_raw(x, v);
        self.push(
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            vec![1],
            vec![loss / l as f64],
            "cross_entropy",
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).iter().sum();
        self.push(Op::Sum(a), vec![1], vec![s], "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len() as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    /// `x · w + b` for `x[n×i]`, `w[i×o]`, optional bias of width `o`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_bias(y, b),
            None => Ok(y),
        }
    }

    // ---- backward -----------------------------------------------------

    /// Reverse pass from the scalar `loss`. The tape cannot be reused afterwards.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if self.value(loss).len() != 1 {
            return Err(Error::NotScalar(self.shape(loss).to_vec()));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        let params = self
            .nodes
            .iter()
            .map(|n| match n.op {
                Op::Leaf { param } if n.requires_grad => param,
                _ => None,
            })
            .collect();
        let leaf = self
            .nodes
            .iter()
            .map(|n| matches!(n.op, Op::Leaf { .. }) && n.requires_grad)
            .collect::<Vec<_>>();
        for (g, is_leaf) in grads.iter_mut().zip(&leaf) {
            if !is_leaf {
                *g = None;
            }
        }
        Ok(Gradients { grads, params })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let mut send = |v: Var, contrib: Vec<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += c),
                slot @ None => *slot = Some(contrib),
            }
        };
        match &node.op {
            Op::Leaf { .. } => {}
            Op::MatMul(a, b) => {
                let c = corruption(CorruptRule::MatMul);
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.nodes[a.0].requires_grad {
                    let mut ga = matmul_bt_raw(g, self.value(*b), m, n, k);
                    ga.iter_mut().for_each(|v| *v *= c);
                    send(*a, ga);
                }
                if self.nodes[b.0].requires_grad {
                    send(*b, matmul_at_raw(self.value(*a), g, m, k, n));
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (self.shape(*a)[0], self.shape(*a)[1]);
                send(*a, transpose_raw(g, c, r));
            }
            Op::Add(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                send(*a, g.iter().zip(bv).map(|(g, b)| g * b).collect());
                send(*b, g.iter().zip(av).map(|(g, a)| g * a).collect());
            }
            Op::Scale(a, c) => send(*a, g.iter().map(|v| v * c).collect()),
            Op::AddBias(x, b) => {
                let d = self.value(*b).len();
                let mut gb = vec![0.0; d];
                for row in g.chunks(d) {
                    gb.iter_mut().zip(row).for_each(|(o, v)| *o += v);
                }
                send(*x, g.to_vec());
                send(*b, gb);
            }
            Op::ScaleRows(x, s) => {
                let d = self.shape(*x)[1];
                let sv = self.value(*s);
                let xv = self.value(*x);
                let gx = g
                    .chunks(d)
                    .zip(sv)
                    .flat_map(|(row, &c)| row.iter().map(move |v| v * c))
                    .collect();
                let gs = g
                    .chunks(d)
                    .zip(xv.chunks(d))
                    .map(|(gr, xr)| gr.iter().zip(xr).map(|(a, b)| a * b).sum())
                    .collect();
                send(*x, gx);
                send(*s, gs);
            }
            Op::Gelu(a) => {
                let c = corruption(CorruptRule::Gelu);
                let gx = g
                    .iter()
                    .zip(self.value(*a))
                    .map(|(g, &x)| g * gelu_grad_scalar(x) * c)
                    .collect();
                send(*a, gx);
            }
            Op::SoftmaxRows(a) => {
                let c = corruption(CorruptRule::SoftmaxRows);
                let cols = self.shape(*a)[1];
                let y = &node.value;
                let mut gx = Vec::with_capacity(g.len());
                for (gr, yr) in g.chunks(cols).zip(y.chunks(cols)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    gx.extend(gr.iter().zip(yr).map(|(gv, yv)| yv * (gv - dot) * c));
                }
                send(*a, gx);
            }
            Op::MeanRows(a) => {
                let p = self.shape(*a)[0];
                let gx = (0..p).flat_map(|_| g.iter().map(move |v| v / p as f64)).collect();
                send(*a, gx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let c = corruption(CorruptRule::LayerNorm);
                let d = self.shape(*x)[1];
                let gv = self.value(*gamma);
                let mut ggamma = vec![0.0; d];
                let mut gbeta = vec![0.0; d];
                let mut gx = Vec::with_capacity(g.len());
                for ((gr, hr), &is) in g.chunks(d).zip(xhat.chunks(d)).zip(inv_std) {
                    let dxhat: Vec<f64> = gr.iter().zip(gv).map(|(a, b)| a * b).collect();
                    let sum_d: f64 = dxhat.iter().sum();
                    let sum_dh: f64 = dxhat.iter().zip(hr).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        ggamma[j] += gr[j] * hr[j];
                        gbeta[j] += gr[j];
                        let v = is / d as f64 * (d as f64 * dxhat[j] - sum_d - hr[j] * sum_dh);
                        gx.push(v * c);
                    }
                }
                send(*x, gx);
                send(*gamma, ggamma);
                send(*beta, gbeta);
            }
            Op::Mse(p, t) => {
                let n = self.value(*p).len() as f64;
                let k = 2.0 * g[0] / n;
                let diff: Vec<f64> = self
                    .value(*p)
                    .iter()
                    .zip(self.value(*t))
                    .map(|(a, b)| k * (a - b))
                    .collect();
                send(*t, diff.iter().map(|v| -v).collect());
                send(*p, diff);
            }
            Op::PerTokenMse(p, t) => {
                let d = self.shape(*p)[1];
                let diff: Vec<f64> = self
                    .value(*p)
                    .chunks(d)
                    .zip(self.value(*t).chunks(d))
                    .zip(g)
                    .flat_map(|((pr, tr), gj)| {
                        let k = 2.0 * gj / d as f64;
                        pr.iter().zip(tr).map(move |(a, b)| k * (a - b))
                    })
                    .collect();
                send(*t, diff.iter().map(|v| -v).collect());
                send(*p, diff);
            }
            Op::Concat { inputs, axis } => {
                let shape = &node.shape;
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let row = shape[*axis] * inner;
                let mut offset = 0;
                for &v in inputs {
                    let chunk = self.shape(v)[*axis] * inner;
                    let mut gv = Vec::with_capacity(outer * chunk);
                    for o in 0..outer {
                        let start = o * row + offset;
                        gv.extend_from_slice(&g[start..start + chunk]);
                    }
                    offset += chunk;
                    send(v, gv);
                }
            }
            Op::Reshape(a) => send(*a, g.to_vec()),
            Op::GatherRows { x, idx } => {
                let d = self.shape(*x)[1];
                let mut gx = vec![0.0; self.value(*x).len()];
                for (j, &r) in idx.iter().enumerate() {
                    gx[r * d..(r + 1) * d]
                        .iter_mut()
                        .zip(&g[j * d..(j + 1) * d])
                        .for_each(|(o, v)| *o += v);
                }
                send(*x, gx);
            }
            Op::IndexAddRows { base, src, idx } => {
                let d = self.shape(*base)[1];
                let gs = idx
                    .iter()
                    .flat_map(|&r| g[r * d..(r + 1) * d].iter().copied())
                    .collect();
                send(*base, g.to_vec());
                send(*src, gs);
            }
            Op::GatherElements { x, rows, cols } => {
                let e = self.shape(*x)[1];
                let mut gx = vec![0.0; self.value(*x).len()];
                for ((&r, &c), gv) in rows.iter().zip(cols).zip(g) {
                    gx[r * e + c] += gv;
                }
                send(*x, gx);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let v = self.shape(*logits)[1];
                let l = targets.len() as f64;
                let mut gx: Vec<f64> = probs.iter().map(|p| p * g[0] / l).collect();
                for (row, &t) in targets.iter().enumerate() {
                    gx[row * v + t] -= g[0] / l;
                }
                send(*logits, gx);
            }
            Op::Sum(a) => send(*a, vec![g[0]; self.value(*a).len()]),
        }
    }
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<Option<ParamId>>,
}

impl Gradients {
    /// Gradient for a leaf that requires grad; `None` if unreachable from the loss.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Parameter gradients. A parameter used several times appears once per use.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.params
            .iter()
            .zip(&self.grads)
            .filter_map(|(p, g)| Some(((*p)?, g.as_deref()?)))
    }
}
