//! Reverse-mode differentiation over a per-batch tape.
//!
//! A [`Graph`] is built fresh for every forward pass. Parameters enter as
//! borrowed leaves so the tape never copies weight tables; every other node
//! owns its value. [`Graph::backward`] walks the tape once in reverse and
//! returns a [`Gradients`] table indexed by [`Var`].
//!
//! Every op checks its output for NaN/Inf and fails with the op's name.

use std::borrow::Cow;

use crate::error::{Error, Result};
use crate::tensor::{matmul_nt_raw, matmul_raw, matmul_tn_raw, Tensor};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Tags accepted by [`Graph::elementwise`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Mul,
    Tanh,
    Sigmoid,
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Bcast {
    Same,
    Scalar,
    Row,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var, Bcast),
    Mul(Var, Var, Bcast),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Softmax(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    GatherRows {
        table: Var,
        rows: Vec<usize>,
        frozen_row: Option<usize>,
    },
    WhereRows {
        keep: Vec<bool>,
        a: Var,
        b: Var,
    },
    StackTime {
        steps: Vec<Var>,
    },
    Reshape(Var),
    AttnPool {
        weights: Var,
        seq: Var,
    },
    Conv1d {
        x: Var,
        filter: Var,
        bias: Var,
        batch: usize,
        seq_len: usize,
    },
    MaskedMax {
        x: Var,
        argmax: Vec<usize>,
    },
    Sum(Var),
    Mean(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
    },
    Mse {
        a: Var,
        b: Var,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Linear { .. } => "linear",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Tanh(_) => "tanh",
            Op::Sigmoid(_) => "sigmoid",
            Op::Relu(_) => "relu",
            Op::Softmax(_) => "softmax_rows",
            Op::Concat { .. } => "concat",
            Op::SliceCols { .. } => "slice_cols",
            Op::GatherRows { .. } => "gather_rows",
            Op::WhereRows { .. } => "where_rows",
            Op::StackTime { .. } => "stack_time",
            Op::Reshape(_) => "reshape",
            Op::AttnPool { .. } => "attention_pool",
            Op::Conv1d { .. } => "conv1d",
            Op::MaskedMax { .. } => "masked_max",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Mse { .. } => "mse",
        }
    }
}

struct Node<'p> {
    value: Cow<'p, Tensor>,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph<'p> {
    nodes: Vec<Node<'p>>,
}

/// Gradients of a scalar with respect to every node that needed one.
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

fn check_finite(op: &str, t: &Tensor) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { op: op.to_string() })
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

impl<'p> Graph<'p> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
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

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        check_finite(op.name(), &value)?;
        let needs_grad = match &op {
            Op::Leaf => false,
            _ => self.inputs_of(&op).iter().any(|&v| self.needs(v)),
        };
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn inputs_of(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b, _) | Op::Mul(a, b, _) => vec![*a, *b],
            Op::Linear { x, w, b } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::Scale(x, _)
            | Op::Tanh(x)
            | Op::Sigmoid(x)
            | Op::Relu(x)
            | Op::Softmax(x)
            | Op::Reshape(x)
            | Op::Sum(x)
            | Op::Mean(x) => vec![*x],
            Op::Concat { inputs, .. } => inputs.clone(),
            Op::SliceCols { x, .. } | Op::MaskedMax { x, .. } => vec![*x],
            Op::GatherRows { table, .. } => vec![*table],
            Op::WhereRows { a, b, .. } => vec![*a, *b],
            Op::StackTime { steps } => steps.clone(),
            Op::AttnPool { weights, seq } => vec![*weights, *seq],
            Op::Conv1d {
                x, filter, bias, ..
            } => vec![*x, *filter, *bias],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::Mse { a, b } => vec![*a, *b],
        }
    }

    fn leaf(&mut self, value: Cow<'p, Tensor>, needs_grad: bool) -> Result<Var> {
        check_finite("leaf", &value)?;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Trainable leaf borrowed from a parameter store.
    pub fn param(&mut self, t: &'p Tensor) -> Result<Var> {
        self.leaf(Cow::Borrowed(t), true)
    }

    /// Owned leaf that receives a gradient.
    pub fn variable(&mut self, t: Tensor) -> Result<Var> {
        self.leaf(Cow::Owned(t), true)
    }

    /// Owned leaf treated as a constant.
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.leaf(Cow::Owned(t), false)
    }

    fn matrix(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let t = self.value(v);
        match t.shape() {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::dim(op, format!("expected a matrix, got shape {s:?}"))),
        }
    }

    /// `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix(a, "matmul")?;
        let (k2, n) = self.matrix(b, "matmul")?;
        if k != k2 {
            return Err(Error::dim("matmul", format!("[{m}x{k}] · [{k2}x{n}]")));
        }
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b))
    }

    /// `x[m×in] · w[out×in]ᵀ + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (m, input) = self.matrix(x, "linear")?;
        let (out, in2) = self.matrix(w, "linear")?;
        if input != in2 {
            return Err(Error::dim(
                "linear",
                format!("input width {input} vs weight [{out}x{in2}]"),
            ));
        }
        let mut y = matmul_nt_raw(self.value(x).data(), self.value(w).data(), m, input, out);
        if let Some(b) = b {
            let bias = self.value(b);
            if bias.numel() != out {
                return Err(Error::dim(
                    "linear",
                    format!("bias has {} values, expected {out}", bias.numel()),
                ));
            }
            for row in y.chunks_mut(out) {
                for (v, bv) in row.iter_mut().zip(bias.data()) {
                    *v += bv;
                }
            }
        }
        self.push(Tensor::new(vec![m, out], y)?, Op::Linear { x, w, b })
    }

    fn bcast(&self, a: Var, b: Var, op: &'static str) -> Result<Bcast> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() {
            return Ok(Bcast::Same);
        }
        if tb.numel() == 1 {
            return Ok(Bcast::Scalar);
        }
        let (_, cols) = ta.as_matrix_dims();
        let row_shaped = match tb.shape() {
            [n] => *n == cols,
            [1, n] => *n == cols,
            _ => false,
        };
        if row_shaped && ta.ndim() >= 1 {
            return Ok(Bcast::Row);
        }
        Err(Error::dim(
            op,
            format!(
                "cannot broadcast {:?} onto {:?} (only scalar and row broadcast)",
                tb.shape(),
                ta.shape()
            ),
        ))
    }

    fn zip_bcast(&self, a: Var, b: Var, mode: Bcast, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let bd = tb.data();
        let n = bd.len();
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let y = match mode {
                    Bcast::Same => bd[i],
                    Bcast::Scalar => bd[0],
                    Bcast::Row => bd[i % n],
                };
                f(x, y)
            })
            .collect();
        Tensor::new(ta.shape().to_vec(), data).expect("same shape")
    }

    /// `a + b`; `b` may be a scalar or a row broadcast over `a`'s rows.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let mode = self.bcast(a, b, "add")?;
        let out = self.zip_bcast(a, b, mode, |x, y| x + y);
        self.push(out, Op::Add(a, b, mode))
    }

    /// `a ⊙ b`; same broadcast rules as [`Graph::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let mode = self.bcast(a, b, "mul")?;
        let out = self.zip_bcast(a, b, mode, |x, y| x * y);
        self.push(out, Op::Mul(a, b, mode))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let out = self.value(x).map(|v| v * c);
        self.push(out, Op::Scale(x, c))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(f64::tanh);
        self.push(out, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(sigmoid);
        self.push(out, Op::Sigmoid(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push(out, Op::Relu(x))
    }

    pub fn elementwise(&mut self, tag: Elementwise, inputs: &[Var]) -> Result<Var> {
        let arity = match tag {
            Elementwise::Add | Elementwise::Mul => 2,
            _ => 1,
        };
        if inputs.len() != arity {
            return Err(Error::dim(
                "elementwise",
                format!("{tag:?} takes {arity} inputs, got {}", inputs.len()),
            ));
        }
        match tag {
            Elementwise::Add => self.add(inputs[0], inputs[1]),
            Elementwise::Mul => self.mul(inputs[0], inputs[1]),
            Elementwise::Tanh => self.tanh(inputs[0]),
            Elementwise::Sigmoid => self.sigmoid(inputs[0]),
            Elementwise::Relu => self.relu(inputs[0]),
        }
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        self.softmax_impl(x, None)
    }

    /// Row-wise softmax where positions with `mask == false` get a score of
    /// −∞ (weight exactly zero). A row with no unmasked entry is an error.
    pub fn masked_softmax_rows(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        self.softmax_impl(x, Some(mask))
    }

    fn softmax_impl(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let t = self.value(x);
        let (rows, cols) = t.as_matrix_dims();
        if cols == 0 {
            return Err(Error::dim("softmax_rows", "rows must have at least one column"));
        }
        if let Some(m) = mask {
            if m.len() != t.numel() {
                return Err(Error::dim(
                    "softmax_rows",
                    format!("mask has {} entries for {} scores", m.len(), t.numel()),
                ));
            }
        }
        let mut out = vec![0.0; t.numel()];
        for r in 0..rows {
            let row = t.row(r);
            let live = |c: usize| mask.map_or(true, |m| m[r * cols + c]);
            let max = (0..cols)
                .filter(|&c| live(c))
                .map(|c| row[c])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::Mask(format!("row {r} has no unmasked position")));
            }
            let dst = &mut out[r * cols..(r + 1) * cols];
            let mut total = 0.0;
            for c in 0..cols {
                if live(c) {
                    dst[c] = (row[c] - max).exp();
                    total += dst[c];
                }
            }
            for v in dst.iter_mut() {
                *v /= total;
            }
        }
        let shape = t.shape().to_vec();
        self.push(Tensor::new(shape, out)?, Op::Softmax(x))
    }

    /// Concatenates along `axis`; all other dims must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::dim("concat", "no inputs"))?;
        let base = self.value(*first).shape().to_vec();
        if axis >= base.len() {
            return Err(Error::dim("concat", format!("axis {axis} for rank {}", base.len())));
        }
        let mut axis_total = 0;
        for &v in inputs {
            let s = self.value(v).shape();
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::dim("concat", format!("{s:?} vs {base:?} on axis {axis}")));
            }
            axis_total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * axis_total * inner);
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = axis_total;
        self.push(
            Tensor::new(shape, data)?,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        )
    }

    /// Columns `start..start+len` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.matrix(x, "slice_cols")?;
        if start + len > cols {
            return Err(Error::dim(
                "slice_cols",
                format!("{start}..{} out of {cols} columns", start + len),
            ));
        }
        let t = self.value(x);
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&t.row(r)[start..start + len]);
        }
        self.push(Tensor::new(vec![rows, len], data)?, Op::SliceCols { x, start })
    }

    /// Selects rows of `table` (viewed as a matrix). Gradients scatter-add
    /// back, except into `frozen_row`, which never receives gradient.
    pub fn gather_rows(
        &mut self,
        table: Var,
        rows: &[usize],
        frozen_row: Option<usize>,
    ) -> Result<Var> {
        let t = self.value(table);
        let (n, cols) = t.as_matrix_dims();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            if r >= n {
                return Err(Error::Vocab {
                    id: r,
                    vocab_size: n,
                });
            }
            data.extend_from_slice(t.row(r));
        }
        self.push(
            Tensor::new(vec![rows.len(), cols], data)?,
            Op::GatherRows {
                table,
                rows: rows.to_vec(),
                frozen_row,
            },
        )
    }

    /// Row `r` of the output is row `r` of `a` where `keep[r]`, else of `b`.
    pub fn where_rows(&mut self, keep: &[bool], a: Var, b: Var) -> Result<Var> {
        let (rows, cols) = self.matrix(a, "where_rows")?;
        if self.value(b).shape() != [rows, cols] || keep.len() != rows {
            return Err(Error::dim(
                "where_rows",
                format!(
                    "a {:?}, b {:?}, {} keep flags",
                    self.value(a).shape(),
                    self.value(b).shape(),
                    keep.len()
                ),
            ));
        }
        let (ta, tb) = (self.value(a), self.value(b));
        let mut data = Vec::with_capacity(rows * cols);
        for (r, &k) in keep.iter().enumerate() {
            data.extend_from_slice(if k { ta.row(r) } else { tb.row(r) });
        }
        self.push(
            Tensor::new(vec![rows, cols], data)?,
            Op::WhereRows {
                keep: keep.to_vec(),
                a,
                b,
            },
        )
    }

    /// Interleaves `T` per-step `[B×D]` matrices into `[B·T × D]` with row
    /// `b·T + t` taken from step `t`.
    pub fn stack_time(&mut self, steps: &[Var]) -> Result<Var> {
        let first = steps
            .first()
            .ok_or_else(|| Error::dim("stack_time", "no steps"))?;
        let (batch, dim) = self.matrix(*first, "stack_time")?;
        for &s in steps {
            if self.value(s).shape() != [batch, dim] {
                return Err(Error::dim("stack_time", "steps differ in shape"));
            }
        }
        let t_len = steps.len();
        let mut data = vec![0.0; batch * t_len * dim];
        for (t, &s) in steps.iter().enumerate() {
            let v = self.value(s);
            for b in 0..batch {
                let dst = (b * t_len + t) * dim;
                data[dst..dst + dim].copy_from_slice(v.row(b));
            }
        }
        self.push(
            Tensor::new(vec![batch * t_len, dim], data)?,
            Op::StackTime {
                steps: steps.to_vec(),
            },
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape.to_vec())?;
        self.push(t, Op::Reshape(x))
    }

    /// `out[b] = Σ_t weights[b,t] · seq[b·T + t]` for `weights[B×T]`,
    /// `seq[B·T × D]`.
    pub fn attention_pool(&mut self, weights: Var, seq: Var) -> Result<Var> {
        let (batch, t_len) = self.matrix(weights, "attention_pool")?;
        let (rows, dim) = self.matrix(seq, "attention_pool")?;
        if rows != batch * t_len {
            return Err(Error::dim(
                "attention_pool",
                format!("weights [{batch}x{t_len}] vs {rows} sequence rows"),
            ));
        }
        let (w, s) = (self.value(weights), self.value(seq));
        let mut out = vec![0.0; batch * dim];
        for b in 0..batch {
            let dst = &mut out[b * dim..(b + 1) * dim];
            for t in 0..t_len {
                let a = w.get2(b, t);
                for (o, v) in dst.iter_mut().zip(s.row(b * t_len + t)) {
                    *o += a * v;
                }
            }
        }
        self.push(
            Tensor::new(vec![batch, dim], out)?,
            Op::AttnPool { weights, seq },
        )
    }

    /// Valid 1-D convolution of one `[width × d]` filter along time.
    ///
    /// `x` is `[B·T × d]`. Output is `[B × T]`: position `p` covers rows
    /// `p..p+width`, with rows past `T` read as zero.
    pub fn conv1d(
        &mut self,
        x: Var,
        filter: Var,
        bias: Var,
        batch: usize,
        seq_len: usize,
    ) -> Result<Var> {
        let (rows, d) = self.matrix(x, "conv1d")?;
        let (width, d2) = self.matrix(filter, "conv1d")?;
        if rows != batch * seq_len || d != d2 || self.value(bias).numel() != 1 {
            return Err(Error::dim(
                "conv1d",
                format!("input [{rows}x{d}] as {batch}x{seq_len}, filter [{width}x{d2}]"),
            ));
        }
        let (tx, tf) = (self.value(x), self.value(filter));
        let bias_v = self.value(bias).data()[0];
        let mut out = vec![0.0; batch * seq_len];
        for b in 0..batch {
            for p in 0..seq_len {
                let mut acc = 0.0;
                for k in 0..width.min(seq_len - p) {
                    acc += tx
                        .row(b * seq_len + p + k)
                        .iter()
                        .zip(tf.row(k))
                        .map(|(u, v)| u * v)
                        .sum::<f64>();
                }
                out[b * seq_len + p] = acc + bias_v;
            }
        }
        self.push(
            Tensor::new(vec![batch, seq_len], out)?,
            Op::Conv1d {
                x,
                filter,
                bias,
                batch,
                seq_len,
            },
        )
    }

    /// Per-row max over the first `valid[b]` columns; output `[B×1]`.
    /// Ties resolve to the earliest column.
    pub fn masked_max(&mut self, x: Var, valid: &[usize]) -> Result<Var> {
        let (rows, cols) = self.matrix(x, "masked_max")?;
        if valid.len() != rows {
            return Err(Error::dim("masked_max", "one valid count per row required"));
        }
        let t = self.value(x);
        let mut argmax = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(rows);
        for (r, &n) in valid.iter().enumerate() {
            if n == 0 || n > cols {
                return Err(Error::Mask(format!(
                    "row {r}: {n} valid positions out of {cols}"
                )));
            }
            let row = &t.row(r)[..n];
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            argmax.push(best);
            out.push(row[best]);
        }
        self.push(Tensor::new(vec![rows, 1], out)?, Op::MaskedMax { x, argmax })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.numel() == 0 {
            return Err(Error::dim("mean", "empty tensor"));
        }
        let m = t.sum() / t.numel() as f64;
        self.push(Tensor::scalar(m), Op::Mean(x))
    }

    /// Mean over rows of `logsumexp(row) − row[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (rows, cols) = self.matrix(logits, "cross_entropy")?;
        if labels.len() != rows || rows == 0 {
            return Err(Error::dim(
                "cross_entropy",
                format!("{rows} logit rows, {} labels", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= cols) {
            return Err(Error::Config(format!(
                "label {bad} outside 0..{cols} in cross_entropy"
            )));
        }
        let t = self.value(logits);
        let mut total = 0.0;
        for (r, &l) in labels.iter().enumerate() {
            let row = t.row(r);
            total += log_sum_exp(row) - row[l];
        }
        self.push(
            Tensor::scalar(total / rows as f64),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
        )
    }

    /// Mean over all elements of `(a − b)²`.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() || ta.numel() == 0 {
            return Err(Error::dim("mse", format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let n = ta.numel() as f64;
        let s: f64 = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        self.push(Tensor::scalar(s / n), Op::Mse { a, b })
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::dim("backward", "loss must be a scalar"));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let contributions = self.local_grads(&node.op, &node.value, &g)?;
            for (v, dv) in contributions {
                if !self.needs(v) {
                    continue;
                }
                if !dv.is_finite() {
                    return Err(Error::NonFinite {
                        op: format!("backward of {}", node.op.name()),
                    });
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&dv),
                    slot @ None => *slot = Some(dv),
                }
            }
            // Keep the gradient of intermediate nodes available to callers.
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn local_grads(&self, op: &Op, out: &Tensor, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let val = |v: Var| self.value(v);
        let like = |v: Var, data: Vec<f64>| Tensor::new(val(v).shape().to_vec(), data);
        let gd = g.data();
        Ok(match op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let (m, k) = self.matrix(*a, "matmul")?;
                let (_, n) = self.matrix(*b, "matmul")?;
                let mut res = Vec::new();
                if self.needs(*a) {
                    res.push((*a, like(*a, matmul_nt_raw(gd, val(*b).data(), m, n, k))?));
                }
                if self.needs(*b) {
                    res.push((*b, like(*b, matmul_tn_raw(val(*a).data(), gd, m, k, n))?));
                }
                res
            }
            Op::Linear { x, w, b } => {
                let (m, input) = self.matrix(*x, "linear")?;
                let (outd, _) = self.matrix(*w, "linear")?;
                let mut res = Vec::new();
                if self.needs(*x) {
                    res.push((*x, like(*x, matmul_raw(gd, val(*w).data(), m, outd, input))?));
                }
                if self.needs(*w) {
                    res.push((*w, like(*w, matmul_tn_raw(gd, val(*x).data(), m, outd, input))?));
                }
                if let Some(b) = b.filter(|b| self.needs(*b)) {
                    let mut db = vec![0.0; outd];
                    for row in gd.chunks(outd) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    res.push((b, like(b, db)?));
                }
                res
            }
            Op::Add(a, b, mode) => {
                let mut res = vec![(*a, g.clone())];
                if self.needs(*b) {
                    res.push((*b, self.reduce_bcast(*b, *mode, gd.to_vec())?));
                }
                res
            }
            Op::Mul(a, b, mode) => {
                let (ta, tb) = (val(*a), val(*b));
                let n = tb.numel();
                let pick = |i: usize| match mode {
                    Bcast::Same => tb.data()[i],
                    Bcast::Scalar => tb.data()[0],
                    Bcast::Row => tb.data()[i % n],
                };
                let mut res = Vec::new();
                if self.needs(*a) {
                    let da = gd.iter().enumerate().map(|(i, &gv)| gv * pick(i)).collect();
                    res.push((*a, like(*a, da)?));
                }
                if self.needs(*b) {
                    let full = gd.iter().zip(ta.data()).map(|(gv, av)| gv * av).collect();
                    res.push((*b, self.reduce_bcast(*b, *mode, full)?));
                }
                res
            }
            Op::Scale(x, c) => vec![(*x, g.map(|v| v * c))],
            Op::Tanh(x) => {
                let d = gd.iter().zip(out.data()).map(|(gv, y)| gv * (1.0 - y * y)).collect();
                vec![(*x, like(*x, d)?)]
            }
            Op::Sigmoid(x) => {
                let d = gd.iter().zip(out.data()).map(|(gv, s)| gv * s * (1.0 - s)).collect();
                vec![(*x, like(*x, d)?)]
            }
            Op::Relu(x) => {
                let d = gd
                    .iter()
                    .zip(val(*x).data())
                    .map(|(gv, v)| if *v > 0.0 { *gv } else { 0.0 })
                    .collect();
                vec![(*x, like(*x, d)?)]
            }
            Op::Softmax(x) => {
                let (rows, cols) = out.as_matrix_dims();
                let mut d = vec![0.0; out.numel()];
                for r in 0..rows {
                    let y = out.row(r);
                    let gr = &gd[r * cols..(r + 1) * cols];
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for c in 0..cols {
                        d[r * cols + c] = y[c] * (gr[c] - dot);
                    }
                }
                vec![(*x, like(*x, d)?)]
            }
            Op::Concat { inputs, axis } => {
                let shape = out.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let mut parts: Vec<Vec<f64>> = inputs
                    .iter()
                    .map(|v| Vec::with_capacity(val(*v).numel()))
                    .collect();
                let mut offset = 0;
                for _ in 0..outer {
                    for (k, v) in inputs.iter().enumerate() {
                        let chunk = val(*v).shape()[*axis] * inner;
                        parts[k].extend_from_slice(&gd[offset..offset + chunk]);
                        offset += chunk;
                    }
                }
                inputs
                    .iter()
                    .zip(parts)
                    .map(|(v, p)| Ok((*v, like(*v, p)?)))
                    .collect::<Result<_>>()?
            }
            Op::SliceCols { x, start } => {
                let (rows, cols) = self.matrix(*x, "slice_cols")?;
                let len = out.shape()[1];
                let mut d = vec![0.0; rows * cols];
                for r in 0..rows {
                    d[r * cols + start..r * cols + start + len]
                        .copy_from_slice(&gd[r * len..(r + 1) * len]);
                }
                vec![(*x, like(*x, d)?)]
            }
            Op::GatherRows {
                table,
                rows,
                frozen_row,
            } => {
                let (_, cols) = val(*table).as_matrix_dims();
                let mut d = vec![0.0; val(*table).numel()];
                for (i, &r) in rows.iter().enumerate() {
                    if Some(r) == *frozen_row {
                        continue;
                    }
                    for (dst, src) in d[r * cols..(r + 1) * cols]
                        .iter_mut()
                        .zip(&gd[i * cols..(i + 1) * cols])
                    {
                        *dst += src;
                    }
                }
                vec![(*table, like(*table, d)?)]
            }
            Op::WhereRows { keep, a, b } => {
                let cols = out.shape()[1];
                let mut da = vec![0.0; out.numel()];
                let mut db = vec![0.0; out.numel()];
                for (r, &k) in keep.iter().enumerate() {
                    let dst = if k { &mut da } else { &mut db };
                    dst[r * cols..(r + 1) * cols].copy_from_slice(&gd[r * cols..(r + 1) * cols]);
                }
                vec![(*a, like(*a, da)?), (*b, like(*b, db)?)]
            }
            Op::StackTime { steps } => {
                let t_len = steps.len();
                let (batch, dim) = self.matrix(steps[0], "stack_time")?;
                steps
                    .iter()
                    .enumerate()
                    .map(|(t, s)| {
                        let mut d = Vec::with_capacity(batch * dim);
                        for b in 0..batch {
                            let src = (b * t_len + t) * dim;
                            d.extend_from_slice(&gd[src..src + dim]);
                        }
                        Ok((*s, like(*s, d)?))
                    })
                    .collect::<Result<_>>()?
            }
            Op::Reshape(x) => vec![(*x, like(*x, gd.to_vec())?)],
            Op::AttnPool { weights, seq } => {
                let (batch, t_len) = self.matrix(*weights, "attention_pool")?;
                let (_, dim) = self.matrix(*seq, "attention_pool")?;
                let (w, s) = (val(*weights), val(*seq));
                let mut dw = vec![0.0; batch * t_len];
                let mut ds = vec![0.0; s.numel()];
                for b in 0..batch {
                    let gb = &gd[b * dim..(b + 1) * dim];
                    for t in 0..t_len {
                        let row = b * t_len + t;
                        dw[row] = gb.iter().zip(s.row(row)).map(|(x, y)| x * y).sum();
                        let a = w.get2(b, t);
                        for (dst, gv) in ds[row * dim..(row + 1) * dim].iter_mut().zip(gb) {
                            *dst = a * gv;
                        }
                    }
                }
                vec![(*weights, like(*weights, dw)?), (*seq, like(*seq, ds)?)]
            }
            Op::Conv1d {
                x,
                filter,
                bias,
                batch,
                seq_len,
            } => {
                let (tx, tf) = (val(*x), val(*filter));
                let (width, d) = self.matrix(*filter, "conv1d")?;
                let mut dx = vec![0.0; tx.numel()];
                let mut df = vec![0.0; tf.numel()];
                let mut dbias = 0.0;
                for b in 0..*batch {
                    for p in 0..*seq_len {
                        let gv = gd[b * seq_len + p];
                        if gv == 0.0 {
                            continue;
                        }
                        dbias += gv;
                        for k in 0..width.min(seq_len - p) {
                            let row = b * seq_len + p + k;
                            let xr = tx.row(row);
                            let fr = tf.row(k);
                            for j in 0..d {
                                df[k * d + j] += gv * xr[j];
                                dx[row * d + j] += gv * fr[j];
                            }
                        }
                    }
                }
                vec![
                    (*x, like(*x, dx)?),
                    (*filter, like(*filter, df)?),
                    (*bias, like(*bias, vec![dbias])?),
                ]
            }
            Op::MaskedMax { x, argmax } => {
                let (_, cols) = self.matrix(*x, "masked_max")?;
                let mut d = vec![0.0; val(*x).numel()];
                for (r, &c) in argmax.iter().enumerate() {
                    d[r * cols + c] = gd[r];
                }
                vec![(*x, like(*x, d)?)]
            }
            Op::Sum(x) => vec![(*x, Tensor::full(val(*x).shape(), gd[0]))],
            Op::Mean(x) => {
                let n = val(*x).numel() as f64;
                vec![(*x, Tensor::full(val(*x).shape(), gd[0] / n))]
            }
            Op::CrossEntropy { logits, labels } => {
                let t = val(*logits);
                let (rows, cols) = t.as_matrix_dims();
                let scale = gd[0] / rows as f64;
                let mut d = vec![0.0; t.numel()];
                for (r, &l) in labels.iter().enumerate() {
                    let row = t.row(r);
                    let lse = log_sum_exp(row);
                    for c in 0..cols {
                        let p = (row[c] - lse).exp();
                        d[r * cols + c] = scale * (p - if c == l { 1.0 } else { 0.0 });
                    }
                }
                vec![(*logits, like(*logits, d)?)]
            }
            Op::Mse { a, b } => {
                let (ta, tb) = (val(*a), val(*b));
                let c = 2.0 * gd[0] / ta.numel() as f64;
                let da: Vec<f64> = ta
                    .data()
                    .iter()
                    .zip(tb.data())
                    .map(|(x, y)| c * (x - y))
                    .collect();
                let mut res = Vec::new();
                if self.needs(*b) {
                    res.push((*b, like(*b, da.iter().map(|v| -v).collect())?));
                }
                res.push((*a, like(*a, da)?));
                res
            }
        })
    }

    fn reduce_bcast(&self, b: Var, mode: Bcast, full: Vec<f64>) -> Result<Tensor> {
        let tb = self.value(b);
        let data = match mode {
            Bcast::Same => full,
            Bcast::Scalar => vec![full.iter().sum()],
            Bcast::Row => {
                let n = tb.numel();
                let mut acc = vec![0.0; n];
                for (i, v) in full.iter().enumerate() {
                    acc[i % n] += v;
                }
                acc
            }
        };
        Tensor::new(tb.shape().to_vec(), data)
    }
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}
