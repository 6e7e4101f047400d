use std::fmt;

use crate::error::{Error, Result};

use super::Tensor;

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Gelu,
    Sigmoid,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    /// `a · bᵀ` with `a: [m, k]`, `b: [n, k]`.
    MatMulT {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Transpose {
        a: Var,
        rows: usize,
        cols: usize,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        c: f64,
    },
    AddRow {
        x: Var,
        b: Var,
        cols: usize,
    },
    Act {
        x: Var,
        kind: Activation,
    },
    Softmax {
        x: Var,
        cols: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        eps: f64,
        cols: usize,
    },
    NormalizeRows {
        x: Var,
        eps: f64,
        cols: usize,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        cols: usize,
        count: usize,
    },
    Sum {
        x: Var,
    },
    Mean {
        x: Var,
    },
    ConcatCols {
        parts: Vec<(Var, usize)>,
        rows: usize,
    },
    ConcatRows {
        parts: Vec<Var>,
    },
    SliceCols {
        x: Var,
        start: usize,
        len: usize,
        cols: usize,
    },
    SliceRows {
        x: Var,
        start: usize,
        len: usize,
        cols: usize,
    },
    Gather {
        x: Var,
        index: Vec<Option<usize>>,
        cols: usize,
    },
    Reshape {
        x: Var,
    },
    BlockDot {
        q: Var,
        k: Var,
        slots: usize,
        cols: usize,
    },
    BlockWeightedSum {
        w: Var,
        v: Var,
        slots: usize,
        cols: usize,
    },
    DepthwiseConv {
        x: Var,
        kernel: Var,
        height: usize,
        width: usize,
        r: usize,
        channels: usize,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::MatMulT { .. } => "matmul_t",
            Op::Transpose { .. } => "transpose",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::AddRow { .. } => "add_row",
            Op::Act { kind, .. } => match kind {
                Activation::Relu => "relu",
                Activation::Gelu => "gelu",
                Activation::Sigmoid => "sigmoid",
            },
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::NormalizeRows { .. } => "normalize_rows",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::ConcatCols { .. } => "concat_cols",
            Op::ConcatRows { .. } => "concat_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::SliceRows { .. } => "slice_rows",
            Op::Gather { .. } => "gather",
            Op::Reshape { .. } => "reshape",
            Op::BlockDot { .. } => "block_dot",
            Op::BlockWeightedSum { .. } => "block_weighted_sum",
            Op::DepthwiseConv { .. } => "depthwise_conv",
        }
    }

    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul { a, b, .. }
            | Op::MatMulT { a, b, .. }
            | Op::Add { a, b }
            | Op::Sub { a, b }
            | Op::Mul { a, b } => vec![*a, *b],
            Op::Transpose { a, .. } | Op::Scale { a, .. } => vec![*a],
            Op::AddRow { x, b, .. } => vec![*x, *b],
            Op::Act { x, .. }
            | Op::Softmax { x, .. }
            | Op::NormalizeRows { x, .. }
            | Op::Sum { x }
            | Op::Mean { x }
            | Op::SliceCols { x, .. }
            | Op::SliceRows { x, .. }
            | Op::Gather { x, .. }
            | Op::Reshape { x } => vec![*x],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::ConcatCols { parts, .. } => parts.iter().map(|p| p.0).collect(),
            Op::ConcatRows { parts } => parts.clone(),
            Op::BlockDot { q, k, .. } => vec![*q, *k],
            Op::BlockWeightedSum { w, v, .. } => vec![*w, *v],
            Op::DepthwiseConv { x, kernel, .. } => vec![*x, *kernel],
        }
    }
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
    label: Option<String>,
}

/// Tape of executed ops. Nodes are appended in execution order, so every
/// node's inputs precede it.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl fmt::Debug for Graph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Graph").field("nodes", &self.nodes.len()).finish()
    }
}

/// `c = a · b (+ beta · c)` for row-major `c: [m, n]`; `a`/`b` strides are free.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    c: &mut [f64],
    beta: f64,
) {
    debug_assert!(m > 0 && k > 0 && n > 0);
    debug_assert!(c.len() >= m * n);
    // SAFETY: the callers pass buffers of at least the extents implied by
    // (m, k, n) and the given strides; all strides are non-negative.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn cols_of(shape: &[usize]) -> usize {
    *shape.last().expect("non-empty shape")
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_row(src: &[f64], dst: &mut [f64]) {
    let max = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = (s - max).exp();
        sum += *d;
    }
    for d in dst.iter_mut() {
        *d /= sum;
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let requires_grad = op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
            label: None,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf; gradients are tracked iff the tensor has a grad buffer.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let v = self.push(t.shape().to_vec(), t.values().to_vec(), Op::Leaf);
        self.nodes[v.0].requires_grad = t.requires_grad();
        v
    }

    pub fn leaf_named(&mut self, t: &Tensor, name: &str) -> Var {
        let v = self.leaf(t);
        self.nodes[v.0].label = Some(name.to_string());
        v
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, shape: Vec<usize>, values: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, values)?;
        Ok(self.leaf(&t))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shapes are consistent")
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Describes the first node holding a NaN/Inf, if any.
    pub fn first_non_finite(&self) -> Option<String> {
        self.nodes.iter().enumerate().find_map(|(i, n)| {
            if n.value.iter().all(|x| x.is_finite()) {
                return None;
            }
            Some(match &n.label {
                Some(l) => format!("node #{i} ({}, `{l}`, shape {:?})", n.op.name(), n.shape),
                None => format!("node #{i} ({}, shape {:?})", n.op.name(), n.shape),
            })
        })
    }

    fn rows_cols(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        let cols = cols_of(&n.shape);
        (n.value.len() / cols, cols)
    }

    fn matrix(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        match self.nodes[v.0].shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::shape(format!("{what}: expected a matrix, got {s:?}"))),
        }
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::shape(format!(
                "{what}: {:?} vs {:?}",
                self.nodes[a.0].shape, self.nodes[b.0].shape
            )));
        }
        Ok(())
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix(a, "matmul lhs")?;
        let (k2, n) = self.matrix(b, "matmul rhs")?;
        if k != k2 {
            return Err(Error::shape(format!("matmul [{m}x{k}] · [{k2}x{n}]")));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a), (k, 1), self.value(b), (n, 1), &mut out, 0.0);
        Ok(self.push(vec![m, n], out, Op::MatMul { a, b, m, k, n }))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix(a, "matmul_t lhs")?;
        let (n, k2) = self.matrix(b, "matmul_t rhs")?;
        if k != k2 {
            return Err(Error::shape(format!("matmul_t [{m}x{k}] · [{n}x{k2}]ᵀ")));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a), (k, 1), self.value(b), (1, k), &mut out, 0.0);
        Ok(self.push(vec![m, n], out, Op::MatMulT { a, b, m, k, n }))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (rows, cols) = self.matrix(a, "transpose")?;
        let src = self.value(a);
        let mut out = vec![0.0; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                out[j * rows + i] = src[i * cols + j];
            }
        }
        Ok(self.push(vec![cols, rows], out, Op::Transpose { a, rows, cols }))
    }

    // ---- elementwise ----------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        Ok(self.push(self.nodes[a.0].shape.clone(), out, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x - y).collect();
        Ok(self.push(self.nodes[a.0].shape.clone(), out, Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        Ok(self.push(self.nodes[a.0].shape.clone(), out, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).iter().map(|x| x * c).collect();
        self.push(self.nodes[a.0].shape.clone(), out, Op::Scale { a, c })
    }

    /// Adds `b` (length = last axis of `x`) to every row of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (_, cols) = self.rows_cols(x);
        if self.value(b).len() != cols {
            return Err(Error::shape(format!(
                "add_row: bias of length {} for rows of width {cols}",
                self.value(b).len()
            )));
        }
        let bias = self.value(b);
        let out = self
            .value(x)
            .chunks(cols)
            .flat_map(|row| row.iter().zip(bias).map(|(v, b)| v + b))
            .collect();
        Ok(self.push(self.nodes[x.0].shape.clone(), out, Op::AddRow { x, b, cols }))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let f: fn(f64) -> f64 = match kind {
            Activation::Relu => |v| v.max(0.0),
            Activation::Gelu => gelu,
            Activation::Sigmoid => sigmoid,
        };
        let out = self.value(x).iter().map(|&v| f(v)).collect();
        self.push(self.nodes[x.0].shape.clone(), out, Op::Act { x, kind })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Relu)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Gelu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Sigmoid)
    }

    // ---- normalisation --------------------------------------------------

    /// Softmax over the last axis (max-subtracted).
    pub fn softmax_last(&mut self, x: Var) -> Var {
        let (_, cols) = self.rows_cols(x);
        let src = self.value(x);
        let mut out = vec![0.0; src.len()];
        for (s, d) in src.chunks(cols).zip(out.chunks_mut(cols)) {
            softmax_row(s, d);
        }
        self.push(self.nodes[x.0].shape.clone(), out, Op::Softmax { x, cols })
    }

    /// Layer normalisation over the last axis with population variance.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (_, cols) = self.rows_cols(x);
        if self.value(gain).len() != cols || self.value(bias).len() != cols {
            return Err(Error::shape(format!(
                "layer_norm: affine params must have length {cols}"
            )));
        }
        let (g, b) = (self.value(gain), self.value(bias));
        let mut out = Vec::with_capacity(self.value(x).len());
        for row in self.value(x).chunks(cols) {
            let (mean, rstd) = moments(row, eps);
            out.extend(row.iter().enumerate().map(|(j, v)| (v - mean) * rstd * g[j] + b[j]));
        }
        Ok(self.push(
            self.nodes[x.0].shape.clone(),
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                eps,
                cols,
            },
        ))
    }

    /// Scales each row to unit L2 norm: `x / (‖x‖ + eps)`.
    pub fn normalize_rows(&mut self, x: Var, eps: f64) -> Var {
        let (_, cols) = self.rows_cols(x);
        let mut out = Vec::with_capacity(self.value(x).len());
        for row in self.value(x).chunks(cols) {
            let s = norm(row) + eps;
            out.extend(row.iter().map(|v| v / s));
        }
        self.push(self.nodes[x.0].shape.clone(), out, Op::NormalizeRows { x, eps, cols })
    }

    // ---- losses and reductions ------------------------------------------

    /// Mean negative log-likelihood over rows whose target is `Some`. A fully
    /// masked input yields 0.
    pub fn cross_entropy_mean(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let (rows, cols) = self.rows_cols(logits);
        if targets.len() != rows {
            return Err(Error::shape(format!(
                "cross_entropy: {} targets for {rows} rows",
                targets.len()
            )));
        }
        if let Some(t) = targets.iter().flatten().find(|&&t| t >= cols) {
            return Err(Error::invalid(format!("target {t} out of range for {cols} classes")));
        }
        let count = targets.iter().flatten().count();
        let mut total = 0.0;
        for (row, t) in self.value(logits).chunks(cols).zip(targets) {
            if let Some(t) = t {
                total += log_sum_exp(row) - row[*t];
            }
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                cols,
                count,
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        self.push(vec![1], vec![s], Op::Sum { x })
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        self.push(vec![1], vec![s], Op::Mean { x })
    }

    // ---- structural -----------------------------------------------------

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.rows_cols(parts[0]).0;
        let mut spec = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.rows_cols(p);
            if r != rows {
                return Err(Error::shape(format!("concat_cols: {r} rows vs {rows}")));
            }
            spec.push((p, c));
        }
        let total: usize = spec.iter().map(|s| s.1).sum();
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &(p, c) in &spec {
                out.extend_from_slice(&self.value(p)[i * c..(i + 1) * c]);
            }
        }
        Ok(self.push(vec![rows, total], out, Op::ConcatCols { parts: spec, rows }))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.rows_cols(parts[0]).1;
        let mut out = Vec::new();
        for &p in parts {
            if self.rows_cols(p).1 != cols {
                return Err(Error::shape("concat_rows: column counts differ"));
            }
            out.extend_from_slice(self.value(p));
        }
        let rows = out.len() / cols;
        Ok(self.push(vec![rows, cols], out, Op::ConcatRows { parts: parts.to_vec() }))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.rows_cols(x);
        if len == 0 || start + len > cols {
            return Err(Error::shape(format!("slice_cols {start}+{len} of {cols}")));
        }
        let out = self
            .value(x)
            .chunks(cols)
            .flat_map(|r| r[start..start + len].iter().copied())
            .collect();
        Ok(self.push(vec![rows, len], out, Op::SliceCols { x, start, len, cols }))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.rows_cols(x);
        if len == 0 || start + len > rows {
            return Err(Error::shape(format!("slice_rows {start}+{len} of {rows}")));
        }
        let out = self.value(x)[start * cols..(start + len) * cols].to_vec();
        Ok(self.push(vec![len, cols], out, Op::SliceRows { x, start, len, cols }))
    }

    /// Row gather; `None` entries produce zero rows.
    pub fn gather_rows(&mut self, x: Var, index: &[Option<usize>]) -> Result<Var> {
        let (rows, cols) = self.rows_cols(x);
        if let Some(i) = index.iter().flatten().find(|&&i| i >= rows) {
            return Err(Error::invalid(format!("gather index {i} out of range for {rows} rows")));
        }
        if index.is_empty() {
            return Err(Error::shape("gather with empty index"));
        }
        let src = self.value(x);
        let mut out = vec![0.0; index.len() * cols];
        for (dst, i) in out.chunks_mut(cols).zip(index) {
            if let Some(i) = i {
                dst.copy_from_slice(&src[i * cols..(i + 1) * cols]);
            }
        }
        Ok(self.push(
            vec![index.len(), cols],
            out,
            Op::Gather {
                x,
                index: index.to_vec(),
                cols,
            },
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() || shape.contains(&0) {
            return Err(Error::shape(format!(
                "reshape {:?} -> {shape:?}",
                self.nodes[x.0].shape
            )));
        }
        let out = self.value(x).to_vec();
        Ok(self.push(shape, out, Op::Reshape { x }))
    }

    // ---- blocked neighbourhood ops --------------------------------------

    /// `out[i, s] = q[i] · k[i * slots + s]` for `q: [n, d]`, `k: [n * slots, d]`.
    pub fn block_dot(&mut self, q: Var, k: Var) -> Result<Var> {
        let (n, d) = self.matrix(q, "block_dot q")?;
        let (nk, dk) = self.matrix(k, "block_dot k")?;
        if dk != d || nk % n != 0 {
            return Err(Error::shape(format!("block_dot q [{n}x{d}] k [{nk}x{dk}]")));
        }
        let slots = nk / n;
        let (qv, kv) = (self.value(q), self.value(k));
        let mut out = vec![0.0; n * slots];
        for i in 0..n {
            let qi = &qv[i * d..(i + 1) * d];
            for s in 0..slots {
                let kr = &kv[(i * slots + s) * d..(i * slots + s + 1) * d];
                out[i * slots + s] = dot(qi, kr);
            }
        }
        Ok(self.push(vec![n, slots], out, Op::BlockDot { q, k, slots, cols: d }))
    }

    /// `out[i] = Σ_s w[i, s] · v[i * slots + s]` for `w: [n, slots]`, `v: [n * slots, d]`.
    pub fn block_weighted_sum(&mut self, w: Var, v: Var) -> Result<Var> {
        let (n, slots) = self.matrix(w, "block_weighted_sum w")?;
        let (nv, d) = self.matrix(v, "block_weighted_sum v")?;
        if nv != n * slots {
            return Err(Error::shape(format!("block_weighted_sum w [{n}x{slots}] v [{nv}x{d}]")));
        }
        let (wv, vv) = (self.value(w), self.value(v));
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            let dst = &mut out[i * d..(i + 1) * d];
            for s in 0..slots {
                let a = wv[i * slots + s];
                let src = &vv[(i * slots + s) * d..(i * slots + s + 1) * d];
                for (o, x) in dst.iter_mut().zip(src) {
                    *o += a * x;
                }
            }
        }
        Ok(self.push(vec![n, d], out, Op::BlockWeightedSum { w, v, slots, cols: d }))
    }

    /// Per-channel `r×r` cross-correlation with zero "same" padding.
    /// `x` is cell-major `[height * width, channels]`, `kernel` is `[channels, r * r]`.
    pub fn depthwise_conv(&mut self, x: Var, kernel: Var, height: usize, width: usize) -> Result<Var> {
        let (cells, channels) = self.matrix(x, "depthwise_conv input")?;
        let (kc, taps) = self.matrix(kernel, "depthwise_conv kernel")?;
        let r = (taps as f64).sqrt().round() as usize;
        if cells != height * width || kc != channels || r * r != taps || r.is_multiple_of(2) {
            return Err(Error::shape(format!(
                "depthwise_conv input [{cells}x{channels}] ({height}x{width}) kernel [{kc}x{taps}]"
            )));
        }
        let (xv, kv) = (self.value(x), self.value(kernel));
        let mut out = vec![0.0; cells * channels];
        for_each_tap(height, width, r, |dst_cell, src_cell, tap| {
            let src = &xv[src_cell * channels..(src_cell + 1) * channels];
            let dst = &mut out[dst_cell * channels..(dst_cell + 1) * channels];
            for c in 0..channels {
                dst[c] += kv[c * taps + tap] * src[c];
            }
        });
        Ok(self.push(
            vec![cells, channels],
            out,
            Op::DepthwiseConv {
                x,
                kernel,
                height,
                width,
                r,
                channels,
            },
        ))
    }

    // ---- reverse sweep --------------------------------------------------

    /// Back-propagates from a scalar. Leaf gradients accumulate across calls;
    /// intermediate gradients are recomputed each time.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        for (node, grad) in self.nodes.iter().zip(self.grads.iter_mut()) {
            if !matches!(node.op, Op::Leaf) {
                *grad = None;
            }
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0].get_or_insert_with(|| vec![0.0])[0] += 1.0;
        for i in (0..=loss.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    /// Clears every stored gradient, including leaves.
    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    fn propagate(&mut self, i: usize, g: &[f64]) {
        let Graph { nodes, grads } = self;
        let node = &nodes[i];
        let val = |v: Var| nodes[v.0].value.as_slice();
        macro_rules! acc {
            ($v:expr) => {
                grad_slot(nodes, grads, $v)
            };
        }
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                if let Some(ga) = acc!(a) {
                    gemm(m, n, k, g, (n, 1), val(b), (1, n), ga, 1.0);
                }
                if let Some(gb) = acc!(b) {
                    gemm(k, m, n, val(a), (1, k), g, (n, 1), gb, 1.0);
                }
            }
            &Op::MatMulT { a, b, m, k, n } => {
                if let Some(ga) = acc!(a) {
                    gemm(m, n, k, g, (n, 1), val(b), (k, 1), ga, 1.0);
                }
                if let Some(gb) = acc!(b) {
                    gemm(n, m, k, g, (1, n), val(a), (k, 1), gb, 1.0);
                }
            }
            &Op::Transpose { a, rows, cols } => {
                if let Some(ga) = acc!(a) {
                    for i in 0..rows {
                        for j in 0..cols {
                            ga[i * cols + j] += g[j * rows + i];
                        }
                    }
                }
            }
            &Op::Add { a, b } => {
                if let Some(ga) = acc!(a) {
                    add_into(ga, g);
                }
                if let Some(gb) = acc!(b) {
                    add_into(gb, g);
                }
            }
            &Op::Sub { a, b } => {
                if let Some(ga) = acc!(a) {
                    add_into(ga, g);
                }
                if let Some(gb) = acc!(b) {
                    gb.iter_mut().zip(g).for_each(|(d, x)| *d -= x);
                }
            }
            &Op::Mul { a, b } => {
                if let Some(ga) = acc!(a) {
                    for ((d, x), y) in ga.iter_mut().zip(g).zip(val(b)) {
                        *d += x * y;
                    }
                }
                if let Some(gb) = acc!(b) {
                    for ((d, x), y) in gb.iter_mut().zip(g).zip(val(a)) {
                        *d += x * y;
                    }
                }
            }
            &Op::Scale { a, c } => {
                if let Some(ga) = acc!(a) {
                    ga.iter_mut().zip(g).for_each(|(d, x)| *d += c * x);
                }
            }
            &Op::AddRow { x, b, cols } => {
                if let Some(gx) = acc!(x) {
                    add_into(gx, g);
                }
                if let Some(gb) = acc!(b) {
                    for row in g.chunks(cols) {
                        add_into(gb, row);
                    }
                }
            }
            &Op::Act { x, kind } => {
                if let Some(gx) = acc!(x) {
                    match kind {
                        Activation::Relu => {
                            for ((d, gi), xi) in gx.iter_mut().zip(g).zip(val(x)) {
                                if *xi > 0.0 {
                                    *d += gi;
                                }
                            }
                        }
                        Activation::Gelu => {
                            for ((d, gi), xi) in gx.iter_mut().zip(g).zip(val(x)) {
                                *d += gi * gelu_grad(*xi);
                            }
                        }
                        Activation::Sigmoid => {
                            for ((d, gi), yi) in gx.iter_mut().zip(g).zip(&node.value) {
                                *d += gi * yi * (1.0 - yi);
                            }
                        }
                    }
                }
            }
            &Op::Softmax { x, cols } => {
                if let Some(gx) = acc!(x) {
                    for ((d, gr), yr) in gx.chunks_mut(cols).zip(g.chunks(cols)).zip(node.value.chunks(cols)) {
                        let inner = dot(gr, yr);
                        for j in 0..cols {
                            d[j] += yr[j] * (gr[j] - inner);
                        }
                    }
                }
            }
            &Op::LayerNorm {
                x,
                gain,
                bias,
                eps,
                cols,
            } => {
                let xv = val(x);
                let gainv = val(gain).to_vec();
                let mut d_gain = vec![0.0; cols];
                let mut d_bias = vec![0.0; cols];
                let mut dx = vec![0.0; xv.len()];
                for ((xr, gr), dxr) in xv.chunks(cols).zip(g.chunks(cols)).zip(dx.chunks_mut(cols)) {
                    let (mean, rstd) = moments(xr, eps);
                    let xhat: Vec<f64> = xr.iter().map(|v| (v - mean) * rstd).collect();
                    let dxhat: Vec<f64> = gr.iter().zip(&gainv).map(|(a, b)| a * b).collect();
                    let m1 = dxhat.iter().sum::<f64>() / cols as f64;
                    let m2 = dot(&dxhat, &xhat) / cols as f64;
                    for j in 0..cols {
                        d_gain[j] += gr[j] * xhat[j];
                        d_bias[j] += gr[j];
                        dxr[j] = rstd * (dxhat[j] - m1 - xhat[j] * m2);
                    }
                }
                if let Some(gx) = acc!(x) {
                    add_into(gx, &dx);
                }
                if let Some(gg) = acc!(gain) {
                    add_into(gg, &d_gain);
                }
                if let Some(gb) = acc!(bias) {
                    add_into(gb, &d_bias);
                }
            }
            &Op::NormalizeRows { x, eps, cols } => {
                let xv = val(x);
                if let Some(gx) = acc!(x) {
                    for ((xr, gr), dr) in xv.chunks(cols).zip(g.chunks(cols)).zip(gx.chunks_mut(cols)) {
                        let n = norm(xr);
                        let s = n + eps;
                        let proj = if n > 0.0 { dot(xr, gr) / (n * s * s) } else { 0.0 };
                        for j in 0..cols {
                            dr[j] += gr[j] / s - xr[j] * proj;
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                cols,
                count,
            } => {
                let (cols, count) = (*cols, *count);
                if count == 0 {
                    return;
                }
                let lv = val(*logits).to_vec();
                if let Some(gl) = acc!(*logits) {
                    let scale = g[0] / count as f64;
                    let mut p = vec![0.0; cols];
                    for ((row, t), d) in lv.chunks(cols).zip(targets).zip(gl.chunks_mut(cols)) {
                        let Some(t) = t else { continue };
                        softmax_row(row, &mut p);
                        for j in 0..cols {
                            d[j] += scale * (p[j] - if j == *t { 1.0 } else { 0.0 });
                        }
                    }
                }
            }
            &Op::Sum { x } => {
                if let Some(gx) = acc!(x) {
                    gx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            &Op::Mean { x } => {
                if let Some(gx) = acc!(x) {
                    let s = g[0] / gx.len() as f64;
                    gx.iter_mut().for_each(|d| *d += s);
                }
            }
            Op::ConcatCols { parts, rows } => {
                let total: usize = parts.iter().map(|p| p.1).sum();
                let mut offset = 0;
                for &(p, c) in parts {
                    if let Some(gp) = acc!(p) {
                        for i in 0..*rows {
                            let src = &g[i * total + offset..i * total + offset + c];
                            add_into(&mut gp[i * c..(i + 1) * c], src);
                        }
                    }
                    offset += c;
                }
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let len = nodes[p.0].value.len();
                    if let Some(gp) = acc!(p) {
                        add_into(gp, &g[offset..offset + len]);
                    }
                    offset += len;
                }
            }
            &Op::SliceCols { x, start, len, cols } => {
                if let Some(gx) = acc!(x) {
                    for (dst, src) in gx.chunks_mut(cols).zip(g.chunks(len)) {
                        add_into(&mut dst[start..start + len], src);
                    }
                }
            }
            &Op::SliceRows { x, start, len, cols } => {
                if let Some(gx) = acc!(x) {
                    add_into(&mut gx[start * cols..(start + len) * cols], g);
                }
            }
            Op::Gather { x, index, cols } => {
                let cols = *cols;
                if let Some(gx) = acc!(*x) {
                    for (src, i) in g.chunks(cols).zip(index) {
                        if let Some(i) = i {
                            add_into(&mut gx[i * cols..(i + 1) * cols], src);
                        }
                    }
                }
            }
            &Op::Reshape { x } => {
                if let Some(gx) = acc!(x) {
                    add_into(gx, g);
                }
            }
            &Op::BlockDot { q, k, slots, cols: d } => {
                let (qv, kv) = (val(q).to_vec(), val(k).to_vec());
                let n = qv.len() / d;
                if let Some(gq) = acc!(q) {
                    for i in 0..n {
                        for s in 0..slots {
                            let e = g[i * slots + s];
                            let kr = &kv[(i * slots + s) * d..(i * slots + s + 1) * d];
                            for (dq, kx) in gq[i * d..(i + 1) * d].iter_mut().zip(kr) {
                                *dq += e * kx;
                            }
                        }
                    }
                }
                if let Some(gk) = acc!(k) {
                    for i in 0..n {
                        let qi = &qv[i * d..(i + 1) * d];
                        for s in 0..slots {
                            let e = g[i * slots + s];
                            let dst = &mut gk[(i * slots + s) * d..(i * slots + s + 1) * d];
                            for (dk, qx) in dst.iter_mut().zip(qi) {
                                *dk += e * qx;
                            }
                        }
                    }
                }
            }
            &Op::BlockWeightedSum { w, v, slots, cols: d } => {
                let (wv, vv) = (val(w).to_vec(), val(v).to_vec());
                let n = wv.len() / slots;
                if let Some(gw) = acc!(w) {
                    for i in 0..n {
                        let gi = &g[i * d..(i + 1) * d];
                        for s in 0..slots {
                            gw[i * slots + s] += dot(gi, &vv[(i * slots + s) * d..(i * slots + s + 1) * d]);
                        }
                    }
                }
                if let Some(gv) = acc!(v) {
                    for i in 0..n {
                        let gi = &g[i * d..(i + 1) * d];
                        for s in 0..slots {
                            let a = wv[i * slots + s];
                            let dst = &mut gv[(i * slots + s) * d..(i * slots + s + 1) * d];
                            for (dv, x) in dst.iter_mut().zip(gi) {
                                *dv += a * x;
                            }
                        }
                    }
                }
            }
            &Op::DepthwiseConv {
                x,
                kernel,
                height,
                width,
                r,
                channels,
            } => {
                let (xv, kv) = (val(x).to_vec(), val(kernel).to_vec());
                let taps = r * r;
                if let Some(gx) = acc!(x) {
                    for_each_tap(height, width, r, |dst_cell, src_cell, tap| {
                        let gd = &g[dst_cell * channels..(dst_cell + 1) * channels];
                        let gs = &mut gx[src_cell * channels..(src_cell + 1) * channels];
                        for c in 0..channels {
                            gs[c] += kv[c * taps + tap] * gd[c];
                        }
                    });
                }
                if let Some(gk) = acc!(kernel) {
                    for_each_tap(height, width, r, |dst_cell, src_cell, tap| {
                        let gd = &g[dst_cell * channels..(dst_cell + 1) * channels];
                        let xs = &xv[src_cell * channels..(src_cell + 1) * channels];
                        for c in 0..channels {
                            gk[c * taps + tap] += gd[c] * xs[c];
                        }
                    });
                }
            }
        }
    }
}

/// Visits every in-grid (output cell, input cell, tap index) triple of a
/// same-padded `r×r` window.
fn for_each_tap(height: usize, width: usize, r: usize, mut f: impl FnMut(usize, usize, usize)) {
    let p = (r / 2) as isize;
    for i in 0..height as isize {
        for j in 0..width as isize {
            for a in 0..r as isize {
                let si = i + a - p;
                if si < 0 || si >= height as isize {
                    continue;
                }
                for b in 0..r as isize {
                    let sj = j + b - p;
                    if sj < 0 || sj >= width as isize {
                        continue;
                    }
                    f(
                        (i * width as isize + j) as usize,
                        (si * width as isize + sj) as usize,
                        (a * r as isize + b) as usize,
                    );
                }
            }
        }
    }
}

fn grad_slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let len = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
}

fn moments(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}
