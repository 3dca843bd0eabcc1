//! Reverse-mode gradient tape.
//!
//! Every operation appends one node holding its output value and a record of
//! its inputs. Inputs always precede their consumers, so the node vector is a
//! topological order and [`Tape::backward`] is a single reverse sweep.
//!
//! Policy: a tape records one forward pass. After `backward` the gradients
//! stay readable through [`Tape::grad`]; calling `backward` again recomputes
//! them from scratch. Build a fresh tape for the next step.

use rand::Rng;

use crate::error::{Error, Result};
use crate::fault;
use crate::tensor::{broadcast_shapes, for_each_broadcast, gemm, numel, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Differentiable operation kinds, used for fault injection and reporting.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Scale,
    Offset,
    MatMul,
    Transpose,
    Reshape,
    BroadcastTo,
    Concat,
    Narrow,
    Sum,
    Mean,
    SumAxis,
    Gather,
    Softmax,
    LayerNorm,
    Gelu,
    Sigmoid,
    Ln,
    Clamp,
    Dropout,
}

impl OpKind {
    pub const DIFFERENTIABLE: [OpKind; 23] = [
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Div,
        OpKind::Scale,
        OpKind::Offset,
        OpKind::MatMul,
        OpKind::Transpose,
        OpKind::Reshape,
        OpKind::BroadcastTo,
        OpKind::Concat,
        OpKind::Narrow,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::SumAxis,
        OpKind::Gather,
        OpKind::Softmax,
        OpKind::LayerNorm,
        OpKind::Gelu,
        OpKind::Sigmoid,
        OpKind::Ln,
        OpKind::Clamp,
        OpKind::Dropout,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Div => "div",
            OpKind::Scale => "scale",
            OpKind::Offset => "offset",
            OpKind::MatMul => "matmul",
            OpKind::Transpose => "transpose",
            OpKind::Reshape => "reshape",
            OpKind::BroadcastTo => "broadcast_to",
            OpKind::Concat => "concat",
            OpKind::Narrow => "narrow",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::SumAxis => "sum_axis",
            OpKind::Gather => "gather",
            OpKind::Softmax => "softmax",
            OpKind::LayerNorm => "layer_norm",
            OpKind::Gelu => "gelu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Ln => "ln",
            OpKind::Clamp => "clamp",
            OpKind::Dropout => "dropout",
        }
    }
}

impl std::str::FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OpKind::DIFFERENTIABLE
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown op kind {s:?}")))
    }
}

impl std::fmt::Display for OpKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    BroadcastTo(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Narrow {
        input: Var,
        axis: usize,
        start: usize,
    },
    Sum(Var),
    Mean(Var),
    SumAxis {
        input: Var,
        axis: usize,
    },
    Gather {
        table: Var,
        indices: Vec<usize>,
    },
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu { input: Var, cdf: Vec<f64> },
    Sigmoid(Var),
    Ln(Var),
    Clamp {
        input: Var,
        lo: f64,
        hi: f64,
    },
    Dropout {
        input: Var,
        mask: Vec<f64>,
    },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Div(..) => OpKind::Div,
            Op::Scale(..) => OpKind::Scale,
            Op::Offset(..) => OpKind::Offset,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Transpose(..) => OpKind::Transpose,
            Op::Reshape(..) => OpKind::Reshape,
            Op::BroadcastTo(..) => OpKind::BroadcastTo,
            Op::Concat { .. } => OpKind::Concat,
            Op::Narrow { .. } => OpKind::Narrow,
            Op::Sum(..) => OpKind::Sum,
            Op::Mean(..) => OpKind::Mean,
            Op::SumAxis { .. } => OpKind::SumAxis,
            Op::Gather { .. } => OpKind::Gather,
            Op::Softmax(..) => OpKind::Softmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Gelu { .. } => OpKind::Gelu,
            Op::Sigmoid(..) => OpKind::Sigmoid,
            Op::Ln(..) => OpKind::Ln,
            Op::Clamp { .. } => OpKind::Clamp,
            Op::Dropout { .. } => OpKind::Dropout,
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::MatMul(a, b) => {
                vec![*a, *b]
            }
            Op::Scale(a, _)
            | Op::Offset(a)
            | Op::Transpose(a)
            | Op::Reshape(a)
            | Op::BroadcastTo(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Softmax(a)
            | Op::Sigmoid(a)
            | Op::Ln(a) => vec![*a],
            Op::Concat { inputs, .. } => inputs.clone(),
            Op::Narrow { input, .. }
            | Op::SumAxis { input, .. }
            | Op::Clamp { input, .. }
            | Op::Gelu { input, .. }
            | Op::Dropout { input, .. } => vec![*input],
            Op::Gather { table, .. } => vec![*table],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of executed operations.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn phi(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// Numerically stable logistic function.
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Splits `shape` around `axis` into (outer, extent, inner) element counts.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Kinds of the recorded operations, in execution order.
    pub fn op_kinds(&self) -> Vec<OpKind> {
        self.nodes.iter().map(|n| n.op.kind()).collect()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(op.kind().name()));
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf whose gradient is tracked.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let shape = broadcast_shapes(name, ta.shape(), tb.shape())?;
        let mut out = vec![0.0; numel(&shape)];
        let (da, db) = (ta.data(), tb.data());
        for_each_broadcast(&shape, ta.shape(), tb.shape(), |o, i, j| {
            out[o] = f(da[i], db[j]);
        });
        self.push(Tensor::new(shape, out)?, op)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let out = self.value(a).map(f);
        self.push(out, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, |x| c * x, Op::Scale(a, c))
    }

    /// `a + c` for a scalar constant `c`.
    pub fn offset(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, |x| x + c, Op::Offset(a))
    }

    /// Batched matrix product `[.., m, k] @ [.., k, n]` with broadcast batch
    /// extents.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        let mismatch = || Error::ShapeMismatch {
            op: "matmul",
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        };
        if sa.len() < 2 || sb.len() < 2 || sa[sa.len() - 1] != sb[sb.len() - 2] {
            return Err(mismatch());
        }
        let (m, k, n) = (sa[sa.len() - 2], sa[sa.len() - 1], sb[sb.len() - 1]);
        let (batch_a, batch_b) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        let batch = broadcast_shapes("matmul", batch_a, batch_b).map_err(|_| mismatch())?;
        let mut shape = batch.clone();
        shape.extend([m, n]);
        let mut out = vec![0.0; numel(&shape)];
        if batch_b.is_empty() {
            let rows = ta.numel() / k;
            gemm(
                rows,
                k,
                n,
                ta.data(),
                false,
                tb.data(),
                false,
                &mut out,
                false,
            );
        } else {
            let (da, db) = (ta.data(), tb.data());
            for_each_broadcast(&batch, batch_a, batch_b, |o, i, j| {
                gemm(
                    m,
                    k,
                    n,
                    &da[i * m * k..],
                    false,
                    &db[j * k * n..],
                    false,
                    &mut out[o * m * n..(o + 1) * m * n],
                    false,
                );
            });
        }
        self.push(Tensor::new(shape, out)?, Op::MatMul(a, b))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let s = t.shape();
        if s.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "transpose needs rank >= 2, got {s:?}"
            )));
        }
        let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
        let mut shape = s.to_vec();
        let len = shape.len();
        shape.swap(len - 2, len - 1);
        let src = t.data();
        let mut out = vec![0.0; src.len()];
        for (blk_in, blk_out) in src.chunks_exact(r * c).zip(out.chunks_exact_mut(r * c)) {
            for i in 0..r {
                for j in 0..c {
                    blk_out[j * r + i] = blk_in[i * c + j];
                }
            }
        }
        self.push(Tensor::new(shape, out)?, Op::Transpose(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).reshape(shape)?;
        self.push(t, Op::Reshape(a))
    }

    /// Materializes `a` broadcast to `shape`.
    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let target = broadcast_shapes("broadcast_to", t.shape(), shape)?;
        if target != shape {
            return Err(Error::ShapeMismatch {
                op: "broadcast_to",
                lhs: t.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let mut out = vec![0.0; numel(shape)];
        let src = t.data();
        for_each_broadcast(shape, t.shape(), shape, |o, i, _| out[o] = src[i]);
        self.push(Tensor::new(shape.to_vec(), out)?, Op::BroadcastTo(a))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::InvalidArgument(format!(
                "concat axis {axis} out of range for {base:?}"
            )));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut out = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        self.push(
            Tensor::new(shape, out)?,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        )
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        let s = t.shape();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(Error::InvalidArgument(format!(
                "narrow({axis}, {start}, {len}) out of range for {s:?}"
            )));
        }
        let (outer, extent, inner) = split_axis(s, axis);
        let mut shape = s.to_vec();
        shape[axis] = len;
        let src = t.data();
        let mut out = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            let base = (o * extent + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        self.push(
            Tensor::new(shape, out)?,
            Op::Narrow {
                input: a,
                axis,
                start,
            },
        )
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let m = t.sum() / t.numel() as f64;
        self.push(Tensor::scalar(m), Op::Mean(a))
    }

    /// Sum along `axis`, removing it from the shape.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.value(a);
        let s = t.shape();
        if axis >= s.len() {
            return Err(Error::InvalidArgument(format!(
                "sum axis {axis} out of range for {s:?}"
            )));
        }
        let (outer, extent, inner) = split_axis(s, axis);
        let src = t.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for e in 0..extent {
                let row = &src[(o * extent + e) * inner..][..inner];
                for (acc, x) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += x;
                }
            }
        }
        let mut shape = s.to_vec();
        shape.remove(axis);
        self.push(Tensor::new(shape, out)?, Op::SumAxis { input: a, axis })
    }

    /// Selects rows of a `[V, d]` table.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let s = t.shape();
        if s.len() != 2 || indices.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "gather_rows needs a rank-2 table and indices, got {s:?}"
            )));
        }
        let (rows, d) = (s[0], s[1]);
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            if i >= rows {
                return Err(Error::InvalidArgument(format!(
                    "row index {i} out of range for {rows} rows"
                )));
            }
            out.extend_from_slice(&t.data()[i * d..(i + 1) * d]);
        }
        self.push(
            Tensor::new(vec![indices.len(), d], out)?,
            Op::Gather {
                table,
                indices: indices.to_vec(),
            },
        )
    }

    /// Softmax over the last axis, computed with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let n = *t
            .shape()
            .last()
            .ok_or_else(|| Error::InvalidArgument("softmax of a rank-0 tensor".into()))?;
        let mut out = t.data().to_vec();
        for row in out.chunks_exact_mut(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                z += *x;
            }
            for x in row.iter_mut() {
                *x /= z;
            }
        }
        let shape = t.shape().to_vec();
        self.push(Tensor::new(shape, out)?, Op::Softmax(a))
    }

    /// Normalizes each last-axis slice to zero mean and unit variance, then
    /// applies `gamma * x + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::InvalidArgument(format!("layer_norm eps {eps} <= 0")));
        }
        let tx = self.value(x);
        let d = *tx.shape().last().unwrap_or(&0);
        let (tg, tb) = (self.value(gamma), self.value(beta));
        if d == 0 || tg.shape() != [d] || tb.shape() != [d] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: tx.shape().to_vec(),
                rhs: tg.shape().to_vec(),
            });
        }
        let rows = tx.numel() / d;
        let mut xhat = vec![0.0; tx.numel()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; tx.numel()];
        for r in 0..rows {
            let slice = &tx.data()[r * d..(r + 1) * d];
            let mean = slice.iter().sum::<f64>() / d as f64;
            let var = slice.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            rstd[r] = inv;
            for j in 0..d {
                let h = (slice[j] - mean) * inv;
                xhat[r * d + j] = h;
                out[r * d + j] = tg.data()[j] * h + tb.data()[j];
            }
        }
        let shape = tx.shape().to_vec();
        self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        )
    }

    /// Exact GELU, `x * Φ(x)`.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (cdf, out): (Vec<f64>, Vec<f64>) = t
            .data()
            .iter()
            .map(|&x| {
                let c = normal_cdf(x);
                (c, x * c)
            })
            .unzip();
        let shape = t.shape().to_vec();
        self.push(Tensor::new(shape, out)?, Op::Gelu { input: a, cdf })
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, sigmoid_scalar, Op::Sigmoid(a))
    }

    /// Natural logarithm; non-positive inputs surface as a non-finite error.
    pub fn ln(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::ln, Op::Ln(a))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        if lo > hi {
            return Err(Error::InvalidArgument(format!("clamp bounds {lo} > {hi}")));
        }
        self.unary(a, |x| x.clamp(lo, hi), Op::Clamp { input: a, lo, hi })
    }

    /// Inverted dropout. In eval mode, or with `rate == 0`, returns `a`
    /// itself so the output is the input bit for bit.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        a: Var,
        rate: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!(
                "dropout rate {rate} outside [0, 1)"
            )));
        }
        if !training || rate == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 - rate;
        let scale = 1.0 / keep;
        let t = self.value(a);
        // Keep iff a uniform u32 falls below keep * 2^32.
        let threshold = (keep * 4294967296.0) as u64;
        let mut words = vec![0u32; t.numel()];
        rng.fill(&mut words[..]);
        let mask: Vec<f64> = words
            .iter()
            .map(|&w| if u64::from(w) < threshold { scale } else { 0.0 })
            .collect();
        let out: Vec<f64> = t.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let shape = t.shape().to_vec();
        self.push(Tensor::new(shape, out)?, Op::Dropout { input: a, mask })
    }

    /// Gradient of the last `backward` loss with respect to `v`, if `v`
    /// participates in gradient flow.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.grads.get(v.0)?.as_ref().map(|g| {
            Tensor::new(self.nodes[v.0].value.shape().to_vec(), g.clone())
                .expect("gradient shape mirrors value shape")
        })
    }

    fn accumulate(&mut self, v: Var, contribution: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = &mut self.grads[v.0];
        match slot {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(&contribution) {
                    *a += b;
                }
            }
            None => *slot = Some(contribution),
        }
    }

    /// Populates gradients of `loss` with respect to every node that
    /// requires them. Each node is visited exactly once, in reverse order.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss).to_vec();
        if numel(&shape) != 1 {
            return Err(Error::NonScalarLoss(shape));
        }
        self.grads = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        let fault = fault::active();
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            if fault == Some(self.nodes[i].op.kind()) {
                let scaled: Vec<f64> = g.iter().map(|x| x * fault::FAULT_SCALE).collect();
                self.backward_node(i, &scaled);
            } else {
                self.backward_node(i, &g);
            }
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn backward_node(&mut self, i: usize, g: &[f64]) {
        // Inputs precede node i, so reading node values while writing grads of
        // earlier nodes never aliases.
        let out_shape = self.nodes[i].value.shape().to_vec();
        let contributions: Vec<(Var, Vec<f64>)> = match &self.nodes[i].op {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(self.nodes[i].op, Op::Sub(..)) {
                    -1.0
                } else {
                    1.0
                };
                let (sa, sb) = (self.shape(*a).to_vec(), self.shape(*b).to_vec());
                let (want_a, want_b) = (self.requires_grad(*a), self.requires_grad(*b));
                if sa == out_shape && sb == out_shape {
                    let mut out = Vec::new();
                    if want_a {
                        out.push((*a, g.to_vec()));
                    }
                    if want_b {
                        out.push((*b, g.iter().map(|x| sign * x).collect()));
                    }
                    out
                } else {
                    let mut out = Vec::new();
                    if want_a {
                        let mut ga = vec![0.0; numel(&sa)];
                        for_each_broadcast(&out_shape, &sa, &sb, |o, ia, _| ga[ia] += g[o]);
                        out.push((*a, ga));
                    }
                    if want_b {
                        let mut gb = vec![0.0; numel(&sb)];
                        for_each_broadcast(&out_shape, &sa, &sb, |o, _, ib| gb[ib] += sign * g[o]);
                        out.push((*b, gb));
                    }
                    out
                }
            }
            Op::Mul(a, b)
                if self.shape(*a) == out_shape.as_slice()
                    && self.shape(*b) == out_shape.as_slice() =>
            {
                let (da, db) = (self.value(*a).data(), self.value(*b).data());
                let mut out = Vec::new();
                if self.requires_grad(*a) {
                    out.push((*a, g.iter().zip(db).map(|(g, y)| g * y).collect()));
                }
                if self.requires_grad(*b) {
                    out.push((*b, g.iter().zip(da).map(|(g, x)| g * x).collect()));
                }
                out
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (da, db) = (ta.data(), tb.data());
                let mut out = Vec::new();
                if self.requires_grad(*a) {
                    let mut ga = vec![0.0; da.len()];
                    for_each_broadcast(&out_shape, ta.shape(), tb.shape(), |o, ia, ib| {
                        ga[ia] += g[o] * db[ib]
                    });
                    out.push((*a, ga));
                }
                if self.requires_grad(*b) {
                    let mut gb = vec![0.0; db.len()];
                    for_each_broadcast(&out_shape, ta.shape(), tb.shape(), |o, ia, ib| {
                        gb[ib] += g[o] * da[ia]
                    });
                    out.push((*b, gb));
                }
                out
            }
            Op::Div(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (da, db) = (ta.data(), tb.data());
                let mut ga = vec![0.0; da.len()];
                let mut gb = vec![0.0; db.len()];
                for_each_broadcast(&out_shape, ta.shape(), tb.shape(), |o, ia, ib| {
                    ga[ia] += g[o] / db[ib];
                    gb[ib] -= g[o] * da[ia] / (db[ib] * db[ib]);
                });
                vec![(*a, ga), (*b, gb)]
            }
            Op::Scale(a, c) => vec![(*a, g.iter().map(|x| c * x).collect())],
            Op::Offset(a) | Op::Reshape(a) => vec![(*a, g.to_vec())],
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                self.matmul_backward(a, b, &out_shape, g);
                return;
            }
            Op::Transpose(a) => {
                let s = self.shape(*a);
                let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
                let mut ga = vec![0.0; g.len()];
                for (blk_g, blk_a) in g.chunks_exact(r * c).zip(ga.chunks_exact_mut(r * c)) {
                    for i in 0..r {
                        for j in 0..c {
                            blk_a[i * c + j] = blk_g[j * r + i];
                        }
                    }
                }
                vec![(*a, ga)]
            }
            Op::BroadcastTo(a) => {
                let sa = self.shape(*a).to_vec();
                let mut ga = vec![0.0; numel(&sa)];
                for_each_broadcast(&out_shape, &sa, &out_shape, |o, ia, _| ga[ia] += g[o]);
                vec![(*a, ga)]
            }
            Op::Concat { inputs, axis } => {
                let (outer, _, inner) = split_axis(&out_shape, *axis);
                let mut parts: Vec<(Var, Vec<f64>)> = inputs
                    .iter()
                    .map(|&v| (v, Vec::with_capacity(self.value(v).numel())))
                    .collect();
                let mut pos = 0;
                for _ in 0..outer {
                    for (v, buf) in parts.iter_mut() {
                        let chunk = self.shape(*v)[*axis] * inner;
                        buf.extend_from_slice(&g[pos..pos + chunk]);
                        pos += chunk;
                    }
                }
                parts
            }
            Op::Narrow { input, axis, start } => {
                let (input, axis, start) = (*input, *axis, *start);
                if !self.requires_grad(input) {
                    return;
                }
                let s = self.shape(input).to_vec();
                let (outer, extent, inner) = split_axis(&s, axis);
                let len = out_shape[axis];
                let ga = self.grads[input.0].get_or_insert_with(|| vec![0.0; numel(&s)]);
                for o in 0..outer {
                    let dst = (o * extent + start) * inner;
                    let src = o * len * inner;
                    for (a, b) in ga[dst..dst + len * inner].iter_mut().zip(&g[src..src + len * inner]) {
                        *a += b;
                    }
                }
                return;
            }
            Op::Sum(a) => vec![(*a, vec![g[0]; self.value(*a).numel()])],
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                vec![(*a, vec![g[0] / n as f64; n])]
            }
            Op::SumAxis { input, axis } => {
                let s = self.shape(*input).to_vec();
                let (outer, extent, inner) = split_axis(&s, *axis);
                let mut ga = vec![0.0; numel(&s)];
                for o in 0..outer {
                    for e in 0..extent {
                        ga[(o * extent + e) * inner..][..inner]
                            .copy_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                vec![(*input, ga)]
            }
            Op::Gather { table, indices } => {
                let d = self.shape(*table)[1];
                let mut ga = vec![0.0; self.value(*table).numel()];
                for (row, &idx) in indices.iter().enumerate() {
                    for j in 0..d {
                        ga[idx * d + j] += g[row * d + j];
                    }
                }
                vec![(*table, ga)]
            }
            Op::Softmax(a) => {
                let y = self.nodes[i].value.data();
                let n = *out_shape.last().unwrap();
                let mut ga = vec![0.0; y.len()];
                for ((yr, gr), out) in y
                    .chunks_exact(n)
                    .zip(g.chunks_exact(n))
                    .zip(ga.chunks_exact_mut(n))
                {
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for j in 0..n {
                        out[j] = yr[j] * (gr[j] - dot);
                    }
                }
                vec![(*a, ga)]
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let gam = self.value(*gamma).data();
                let d = gam.len();
                let mut gx = vec![0.0; xhat.len()];
                let mut gg = vec![0.0; d];
                let mut gbeta = vec![0.0; d];
                for (r, &inv) in rstd.iter().enumerate() {
                    let h = &xhat[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    let mut mean_dh = 0.0;
                    let mut mean_dh_h = 0.0;
                    for j in 0..d {
                        let dh = gr[j] * gam[j];
                        mean_dh += dh;
                        mean_dh_h += dh * h[j];
                        gg[j] += gr[j] * h[j];
                        gbeta[j] += gr[j];
                    }
                    mean_dh /= d as f64;
                    mean_dh_h /= d as f64;
                    for j in 0..d {
                        let dh = gr[j] * gam[j];
                        gx[r * d + j] = inv * (dh - mean_dh - h[j] * mean_dh_h);
                    }
                }
                vec![(*x, gx), (*gamma, gg), (*beta, gbeta)]
            }
            Op::Gelu { input, cdf } => {
                let x = self.value(*input).data();
                let ga = x
                    .iter()
                    .zip(cdf)
                    .zip(g)
                    .map(|((&x, &c), &g)| g * (c + x * phi(x)))
                    .collect();
                vec![(*input, ga)]
            }
            Op::Sigmoid(a) => {
                let y = self.nodes[i].value.data();
                let ga = y.iter().zip(g).map(|(&y, &g)| g * y * (1.0 - y)).collect();
                vec![(*a, ga)]
            }
            Op::Ln(a) => {
                let x = self.value(*a).data();
                vec![(*a, x.iter().zip(g).map(|(x, g)| g / x).collect())]
            }
            Op::Clamp { input, lo, hi } => {
                let x = self.value(*input).data();
                let ga = x
                    .iter()
                    .zip(g)
                    .map(|(&x, &g)| if x >= *lo && x <= *hi { g } else { 0.0 })
                    .collect();
                vec![(*input, ga)]
            }
            Op::Dropout { input, mask } => {
                vec![(*input, mask.iter().zip(g).map(|(m, g)| m * g).collect())]
            }
        };
        for (v, c) in contributions {
            self.accumulate(v, c);
        }
    }

    fn matmul_backward(&mut self, a: Var, b: Var, out_shape: &[usize], g: &[f64]) {
        let want_a = self.requires_grad(a);
        let want_b = self.requires_grad(b);
        // Gradients accumulate in place, so the operand slots leave the
        // gradient table while the node values are borrowed.
        let mut ga = if want_a {
            Some(self.grads[a.0].take().unwrap_or_else(|| vec![0.0; self.nodes[a.0].value.numel()]))
        } else {
            None
        };
        let mut gb = if want_b && a != b {
            Some(self.grads[b.0].take().unwrap_or_else(|| vec![0.0; self.nodes[b.0].value.numel()]))
        } else {
            None
        };
        let mut gb_shared = if want_b && a == b {
            Some(vec![0.0; self.nodes[b.0].value.numel()])
        } else {
            None
        };
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (sa, sb) = (ta.shape(), tb.shape());
        let (m, k, n) = (sa[sa.len() - 2], sa[sa.len() - 1], sb[sb.len() - 1]);
        let (batch_a, batch_b) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        let gb_buf = gb.as_mut().or(gb_shared.as_mut());
        if batch_b.is_empty() {
            let rows = ta.numel() / k;
            if let Some(ga) = ga.as_mut() {
                gemm(rows, n, k, g, false, tb.data(), true, ga, true);
            }
            if let Some(gb) = gb_buf {
                gemm(k, rows, n, ta.data(), true, g, false, gb, true);
            }
        } else {
            let batch = &out_shape[..out_shape.len() - 2];
            let (da, db) = (ta.data(), tb.data());
            let mut gb_buf = gb_buf;
            for_each_broadcast(batch, batch_a, batch_b, |o, i, j| {
                let go = &g[o * m * n..(o + 1) * m * n];
                if let Some(ga) = ga.as_mut() {
                    let dst = &mut ga[i * m * k..(i + 1) * m * k];
                    gemm(m, n, k, go, false, &db[j * k * n..], true, dst, true);
                }
                if let Some(gb) = gb_buf.as_mut() {
                    let dst = &mut gb[j * k * n..(j + 1) * k * n];
                    gemm(k, m, n, &da[i * m * k..], true, go, false, dst, true);
                }
            });
        }
        if let Some(ga) = ga {
            self.grads[a.0] = Some(ga);
        }
        if let Some(gb) = gb {
            self.grads[b.0] = Some(gb);
        }
        if let Some(gb) = gb_shared {
            self.accumulate(b, gb);
        }
    }
}
