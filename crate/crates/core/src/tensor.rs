//! Dense row-major `f64` tensors with a reverse-mode differentiation graph.
//!
//! A [`Tensor`] is an immutable array plus an optional link to the operation
//! that produced it. Only the gradient slot is mutable. Leaves created with
//! [`Tensor::param`] collect gradients when [`Tensor::backward`] is called on
//! a scalar that depends on them; gradients add up across calls until
//! [`Tensor::zero_grad`] clears them.
//!
//! Broadcasting is limited to trailing-axis affine operations
//! ([`Tensor::add_row`] and the gain/bias of [`Tensor::layer_norm`]); every
//! other shape disagreement is an error.

use std::cell::{Cell, RefCell};
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("shape {shape:?} does not hold {len} values")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{0}: non-finite input")]
    NonFinite(&'static str),
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("index {index} out of range (size {size})")]
    Index { index: usize, size: usize },
}

pub type Result<T> = std::result::Result<T, TensorError>;

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
    static GRAPH_NODES: Cell<u64> = const { Cell::new(0) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// Number of graph nodes (tensors with a backward link) created so far on
/// this thread.
pub fn graph_node_count() -> u64 {
    GRAPH_NODES.with(Cell::get)
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(Cell::get)
}

/// Disables graph construction until the guard is dropped.
pub struct NoGradGuard {
    prev: bool,
}

pub fn no_grad() -> NoGradGuard {
    let prev = GRAD_ENABLED.with(|c| c.replace(false));
    NoGradGuard { prev }
}

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|c| c.set(self.prev));
    }
}

enum Op {
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    Scale(Tensor, f64),
    AddRow(Tensor, Tensor),
    MatMul(Tensor, Tensor),
    Transpose(Tensor),
    Softmax {
        x: Tensor,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        x: Tensor,
        gain: Tensor,
        bias: Tensor,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu(Tensor),
    Conv1d {
        x: Tensor,
        weight: Tensor,
        bias: Option<Tensor>,
        geom: ConvGeometry,
    },
    GatherRows(Tensor, Vec<usize>),
    ScatterRows {
        visible: Tensor,
        fill: Tensor,
        index: Vec<Option<usize>>,
    },
    SliceCols(Tensor, usize),
    ConcatCols(Vec<Tensor>),
    Sum(Tensor),
    Mean(Tensor),
    CrossEntropy {
        logits: Tensor,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
}

impl Op {
    fn parents(&self) -> Vec<&Tensor> {
        match self {
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddRow(a, b) | Op::MatMul(a, b) => {
                vec![a, b]
            }
            Op::Scale(a, _)
            | Op::Transpose(a)
            | Op::Gelu(a)
            | Op::GatherRows(a, _)
            | Op::SliceCols(a, _)
            | Op::Sum(a)
            | Op::Mean(a) => vec![a],
            Op::Softmax { x, .. } => vec![x],
            Op::LayerNorm { x, gain, bias, .. } => vec![x, gain, bias],
            Op::Conv1d {
                x, weight, bias, ..
            } => {
                let mut p = vec![x, weight];
                if let Some(b) = bias {
                    p.push(b);
                }
                p
            }
            Op::ScatterRows { visible, fill, .. } => vec![visible, fill],
            Op::ConcatCols(parts) => parts.iter().collect(),
            Op::CrossEntropy { logits, .. } => vec![logits],
        }
    }
}

struct Node {
    id: u64,
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: RefCell<Option<Vec<f64>>>,
    requires_grad: bool,
    op: Option<Op>,
}

/// Shared handle to an immutable array and its gradient slot.
#[derive(Clone)]
pub struct Tensor(Rc<Node>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .field("len", &self.0.data.len())
            .finish()
    }
}

/// Stride/padding/groups of a 1-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvGeometry {
    pub fn new(stride: usize, padding: usize, groups: usize) -> Self {
        Self {
            stride,
            padding,
            groups,
        }
    }

    /// Output length of an input of `len` samples, `None` when the kernel
    /// does not fit.
    pub fn output_len(&self, len: usize, kernel: usize) -> Option<usize> {
        let padded = len + 2 * self.padding;
        if padded < kernel || self.stride == 0 {
            return None;
        }
        Some((padded - kernel) / self.stride + 1)
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

impl Tensor {
    fn build(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, op: Option<Op>) -> Tensor {
        debug_assert_eq!(numel(&shape), data.len());
        if op.is_some() {
            GRAPH_NODES.with(|c| c.set(c.get() + 1));
        }
        Tensor(Rc::new(Node {
            id: next_id(),
            shape,
            data,
            grad: RefCell::new(None),
            requires_grad,
            op,
        }))
    }

    /// Result of an operation: linked into the graph only when some input
    /// tracks gradients and graph construction is enabled.
    fn from_op(shape: Vec<usize>, data: Vec<f64>, op: Op) -> Tensor {
        let track = grad_enabled() && op.parents().iter().any(|p| p.0.requires_grad);
        if track {
            Tensor::build(shape, data, true, Some(op))
        } else {
            Tensor::build(shape, data, false, None)
        }
    }

    /// Constant leaf (no gradient).
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        if numel(shape) != data.len() {
            return Err(TensorError::DataLength {
                shape: shape.to_vec(),
                len: data.len(),
            });
        }
        Ok(Tensor::build(shape.to_vec(), data, false, None))
    }

    /// Gradient-collecting leaf.
    pub fn param(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        if numel(shape) != data.len() {
            return Err(TensorError::DataLength {
                shape: shape.to_vec(),
                len: data.len(),
            });
        }
        Ok(Tensor::build(shape.to_vec(), data, true, None))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::build(shape.to_vec(), vec![0.0; numel(shape)], false, None)
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::build(Vec::new(), vec![value], false, None)
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn len(&self) -> usize {
        self.0.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.data.is_empty()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// True when this tensor was produced by a tracked operation.
    pub fn has_graph(&self) -> bool {
        self.0.op.is_some()
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        self.0.data[0]
    }

    /// Same values, cut from the graph.
    pub fn detach(&self) -> Tensor {
        Tensor::build(self.0.shape.clone(), self.0.data.clone(), false, None)
    }

    fn rows_cols(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.0.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            s => Err(TensorError::Shape {
                op,
                left: s.to_vec(),
                right: vec![],
            }),
        }
    }

    fn same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.0.shape != other.0.shape {
            return Err(TensorError::Shape {
                op,
                left: self.0.shape.clone(),
                right: other.0.shape.clone(),
            });
        }
        Ok(())
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "add")?;
        let data = self.data().iter().zip(other.data()).map(|(a, b)| a + b).collect();
        Ok(Tensor::from_op(self.0.shape.clone(), data, Op::Add(self.clone(), other.clone())))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "sub")?;
        let data = self.data().iter().zip(other.data()).map(|(a, b)| a - b).collect();
        Ok(Tensor::from_op(self.0.shape.clone(), data, Op::Sub(self.clone(), other.clone())))
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "mul")?;
        let data = self.data().iter().zip(other.data()).map(|(a, b)| a * b).collect();
        Ok(Tensor::from_op(self.0.shape.clone(), data, Op::Mul(self.clone(), other.clone())))
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        let data = self.data().iter().map(|a| a * factor).collect();
        Tensor::from_op(self.0.shape.clone(), data, Op::Scale(self.clone(), factor))
    }

    /// Adds a length-`d` vector to every trailing-axis slice.
    pub fn add_row(&self, bias: &Tensor) -> Result<Tensor> {
        let d = *self.0.shape.last().unwrap_or(&0);
        if bias.0.shape != [d] {
            return Err(TensorError::Shape {
                op: "add_row",
                left: self.0.shape.clone(),
                right: bias.0.shape.clone(),
            });
        }
        let b = bias.data();
        let data = self
            .data()
            .chunks(d.max(1))
            .flat_map(|row| row.iter().zip(b).map(|(x, y)| x + y))
            .collect();
        Ok(Tensor::from_op(self.0.shape.clone(), data, Op::AddRow(self.clone(), bias.clone())))
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let mismatch = || TensorError::Shape {
            op: "matmul",
            left: self.0.shape.clone(),
            right: other.0.shape.clone(),
        };
        let (m, k) = self.rows_cols("matmul").map_err(|_| mismatch())?;
        let (k2, n) = other.rows_cols("matmul").map_err(|_| mismatch())?;
        if k != k2 {
            return Err(mismatch());
        }
        let data = matmul_raw(self.data(), other.data(), m, k, n);
        Ok(Tensor::from_op(vec![m, n], data, Op::MatMul(self.clone(), other.clone())))
    }

    /// Transpose of a matrix.
    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.rows_cols("transpose")?;
        let data = transpose_raw(self.data(), r, c);
        Ok(Tensor::from_op(vec![c, r], data, Op::Transpose(self.clone())))
    }

    /// Softmax along `axis`, stabilized by subtracting each slice's maximum.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        let shape = &self.0.shape;
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(TensorError::Config(format!(
                "softmax axis {axis} invalid for shape {shape:?}"
            )));
        }
        if self.data().iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite("softmax"));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let x = self.data();
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).map(|j| x[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..len {
                    let e = (x[at(j)] - max).exp();
                    out[at(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    out[at(j)] /= total;
                }
            }
        }
        Ok(Tensor::from_op(
            shape.clone(),
            out,
            Op::Softmax {
                x: self.clone(),
                outer,
                len,
                inner,
            },
        ))
    }

    /// Normalizes each trailing-axis slice to zero mean and unit variance,
    /// then applies `gain` and `bias`.
    pub fn layer_norm(&self, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
        let d = *self.0.shape.last().unwrap_or(&0);
        if d == 0 || gain.0.shape != [d] || bias.0.shape != [d] {
            return Err(TensorError::Shape {
                op: "layer_norm",
                left: self.0.shape.clone(),
                right: gain.0.shape.clone(),
            });
        }
        if eps <= 0.0 {
            return Err(TensorError::Config(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let rows = self.len() / d;
        let mut xhat = vec![0.0; self.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; self.len()];
        let (g, b) = (gain.data(), bias.data());
        for (r, row) in self.data().chunks(d).enumerate() {
            let (mean, var) = mean_var(row);
            let s = 1.0 / (var + eps).sqrt();
            rstd[r] = s;
            for j in 0..d {
                let h = (row[j] - mean) * s;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        Ok(Tensor::from_op(
            self.0.shape.clone(),
            out,
            Op::LayerNorm {
                x: self.clone(),
                gain: gain.clone(),
                bias: bias.clone(),
                xhat,
                rstd,
            },
        ))
    }

    /// Exact Gaussian-error linear unit, `0.5·x·(1 + erf(x/√2))`.
    pub fn gelu(&self) -> Tensor {
        let data = self.data().iter().map(|&x| x * std_normal_cdf(x)).collect();
        Tensor::from_op(self.0.shape.clone(), data, Op::Gelu(self.clone()))
    }

    /// Grouped 1-D convolution of a `[c_in × T]` signal with a
    /// `[c_out × c_in/groups × k]` kernel, zero padding on both ends.
    pub fn conv1d(
        &self,
        weight: &Tensor,
        bias: Option<&Tensor>,
        geom: ConvGeometry,
    ) -> Result<Tensor> {
        let mismatch = |right: &Tensor| TensorError::Shape {
            op: "conv1d",
            left: self.0.shape.clone(),
            right: right.0.shape.clone(),
        };
        let (c_in, len) = self.rows_cols("conv1d")?;
        let [c_out, c_group, kernel] = weight.0.shape[..] else {
            return Err(mismatch(weight));
        };
        let g = geom.groups;
        if g == 0 || c_in % g != 0 || c_out % g != 0 {
            return Err(TensorError::Config(format!(
                "conv1d: {c_in} input and {c_out} output channels not divisible by {g} groups"
            )));
        }
        if c_group != c_in / g {
            return Err(mismatch(weight));
        }
        if let Some(b) = bias {
            if b.0.shape != [c_out] {
                return Err(mismatch(b));
            }
        }
        let t_out = geom.output_len(len, kernel).ok_or_else(|| {
            TensorError::Config(format!(
                "conv1d: kernel {kernel} longer than padded input {}",
                len + 2 * geom.padding
            ))
        })?;
        let (x, w) = (self.data(), weight.data());
        let out_per_group = c_out / g;
        let mut out = vec![0.0; c_out * t_out];
        for o in 0..c_out {
            let group = o / out_per_group;
            let row = &mut out[o * t_out..(o + 1) * t_out];
            if let Some(b) = bias {
                row.iter_mut().for_each(|v| *v = b.data()[o]);
            }
            for cl in 0..c_group {
                let ci = group * c_group + cl;
                let xrow = &x[ci * len..(ci + 1) * len];
                let wk = &w[(o * c_group + cl) * kernel..(o * c_group + cl + 1) * kernel];
                for (t, acc) in row.iter_mut().enumerate() {
                    let base = (t * geom.stride) as isize - geom.padding as isize;
                    for (j, wv) in wk.iter().enumerate() {
                        let p = base + j as isize;
                        if p >= 0 && (p as usize) < len {
                            *acc += wv * xrow[p as usize];
                        }
                    }
                }
            }
        }
        Ok(Tensor::from_op(
            vec![c_out, t_out],
            out,
            Op::Conv1d {
                x: self.clone(),
                weight: weight.clone(),
                bias: bias.cloned(),
                geom,
            },
        ))
    }

    /// Row gather from a matrix: embedding lookup and frame selection.
    pub fn gather_rows(&self, rows: &[usize]) -> Result<Tensor> {
        let (r, c) = self.rows_cols("gather_rows")?;
        let mut data = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            if i >= r {
                return Err(TensorError::Index { index: i, size: r });
            }
            data.extend_from_slice(&self.data()[i * c..(i + 1) * c]);
        }
        Ok(Tensor::from_op(vec![rows.len(), c], data, Op::GatherRows(self.clone(), rows.to_vec())))
    }

    /// Builds a `[index.len() × d]` matrix whose row `t` is `visible[i]` when
    /// `index[t] == Some(i)` and `fill` otherwise.
    pub fn scatter_rows(visible: &Tensor, fill: &Tensor, index: &[Option<usize>]) -> Result<Tensor> {
        let (n, d) = visible.rows_cols("scatter_rows")?;
        if fill.0.shape != [d] {
            return Err(TensorError::Shape {
                op: "scatter_rows",
                left: visible.0.shape.clone(),
                right: fill.0.shape.clone(),
            });
        }
        let mut data = Vec::with_capacity(index.len() * d);
        for slot in index {
            match *slot {
                Some(i) if i < n => data.extend_from_slice(&visible.data()[i * d..(i + 1) * d]),
                Some(i) => return Err(TensorError::Index { index: i, size: n }),
                None => data.extend_from_slice(fill.data()),
            }
        }
        Ok(Tensor::from_op(
            vec![index.len(), d],
            data,
            Op::ScatterRows {
                visible: visible.clone(),
                fill: fill.clone(),
                index: index.to_vec(),
            },
        ))
    }

    /// Columns `start..start + width` of a matrix.
    pub fn slice_cols(&self, start: usize, width: usize) -> Result<Tensor> {
        let (r, c) = self.rows_cols("slice_cols")?;
        if start + width > c {
            return Err(TensorError::Index {
                index: start + width,
                size: c,
            });
        }
        let data = self
            .data()
            .chunks(c)
            .flat_map(|row| row[start..start + width].iter().copied())
            .collect::<Vec<_>>();
        debug_assert_eq!(data.len(), r * width);
        Ok(Tensor::from_op(vec![r, width], data, Op::SliceCols(self.clone(), start)))
    }

    /// Side-by-side concatenation of matrices with equal row counts.
    pub fn concat_cols(parts: &[Tensor]) -> Result<Tensor> {
        let Some(first) = parts.first() else {
            return Err(TensorError::Config("concat_cols of zero tensors".into()));
        };
        let (r, _) = first.rows_cols("concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (pr, pc) = p.rows_cols("concat_cols")?;
            if pr != r {
                return Err(TensorError::Shape {
                    op: "concat_cols",
                    left: first.0.shape.clone(),
                    right: p.0.shape.clone(),
                });
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for (p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&p.data()[i * w..(i + 1) * w]);
            }
        }
        Ok(Tensor::from_op(vec![r, total], data, Op::ConcatCols(parts.to_vec())))
    }

    pub fn sum(&self) -> Tensor {
        let s = self.data().iter().sum();
        Tensor::from_op(Vec::new(), vec![s], Op::Sum(self.clone()))
    }

    pub fn mean(&self) -> Tensor {
        let n = self.len().max(1) as f64;
        let s = self.data().iter().sum::<f64>() / n;
        Tensor::from_op(Vec::new(), vec![s], Op::Mean(self.clone()))
    }

    /// Mean softmax cross-entropy of `[n × V]` logits against class ids.
    pub fn cross_entropy(&self, targets: &[usize]) -> Result<Tensor> {
        let (n, v) = self.rows_cols("cross_entropy")?;
        if targets.len() != n || n == 0 {
            return Err(TensorError::Shape {
                op: "cross_entropy",
                left: self.0.shape.clone(),
                right: vec![targets.len()],
            });
        }
        if self.data().iter().any(|x| !x.is_finite()) {
            return Err(TensorError::NonFinite("cross_entropy"));
        }
        let mut probs = vec![0.0; n * v];
        let mut loss = 0.0;
        for (i, row) in self.data().chunks(v).enumerate() {
            let t = targets[i];
            if t >= v {
                return Err(TensorError::Index { index: t, size: v });
            }
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = row.iter().map(|x| (x - max).exp()).sum();
            let log_z = max + total.ln();
            loss += log_z - row[t];
            for j in 0..v {
                probs[i * v + j] = (row[j] - log_z).exp();
            }
        }
        Ok(Tensor::from_op(
            Vec::new(),
            vec![loss / n as f64],
            Op::CrossEntropy {
                logits: self.clone(),
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// Populates the gradient slots of every gradient-collecting leaf this
    /// scalar depends on. Gradients are added to whatever the slots hold.
    pub fn backward(&self) -> Result<()> {
        if self.len() != 1 {
            return Err(TensorError::NotScalar(self.0.shape.clone()));
        }
        if !self.item().is_finite() {
            return Err(TensorError::NonFinite("backward"));
        }
        if !self.0.requires_grad {
            return Ok(());
        }
        let order = self.topological_order();
        let mut grads: HashMap<u64, Vec<f64>> = HashMap::new();
        grads.insert(self.0.id, vec![1.0]);
        for node in order.iter().rev() {
            let Some(g) = grads.remove(&node.0.id) else {
                continue;
            };
            match &node.0.op {
                None => {
                    let mut slot = node.0.grad.borrow_mut();
                    match slot.as_mut() {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        None => *slot = Some(g),
                    }
                }
                Some(op) => node.propagate(op, &g, &mut grads),
            }
        }
        Ok(())
    }

    fn topological_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut seen = HashSet::new();
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !seen.insert(t.0.id) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(op) = &t.0.op {
                for p in op.parents() {
                    if p.0.requires_grad && !seen.contains(&p.0.id) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }
        order
    }

    fn propagate(&self, op: &Op, g: &[f64], grads: &mut HashMap<u64, Vec<f64>>) {
        let mut send = |t: &Tensor, contrib: Vec<f64>| {
            if !t.0.requires_grad {
                return;
            }
            match grads.get_mut(&t.0.id) {
                Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, b)| *a += b),
                None => {
                    grads.insert(t.0.id, contrib);
                }
            }
        };
        match op {
            Op::Add(a, b) => {
                send(a, g.to_vec());
                send(b, g.to_vec());
            }
            Op::Sub(a, b) => {
                send(a, g.to_vec());
                send(b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                send(a, g.iter().zip(b.data()).map(|(x, y)| x * y).collect());
                send(b, g.iter().zip(a.data()).map(|(x, y)| x * y).collect());
            }
            Op::Scale(a, c) => send(a, g.iter().map(|v| v * c).collect()),
            Op::AddRow(x, b) => {
                let d = b.len();
                let mut gb = vec![0.0; d];
                for row in g.chunks(d) {
                    gb.iter_mut().zip(row).for_each(|(acc, v)| *acc += v);
                }
                send(x, g.to_vec());
                send(b, gb);
            }
            Op::MatMul(a, b) => {
                let (m, k) = (a.0.shape[0], a.0.shape[1]);
                let n = b.0.shape[1];
                if a.0.requires_grad {
                    let bt = transpose_raw(b.data(), k, n);
                    send(a, matmul_raw(g, &bt, m, n, k));
                }
                if b.0.requires_grad {
                    let at = transpose_raw(a.data(), m, k);
                    send(b, matmul_raw(&at, g, k, m, n));
                }
            }
            Op::Transpose(x) => {
                let (r, c) = (x.0.shape[0], x.0.shape[1]);
                send(x, transpose_raw(g, c, r));
            }
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            } => {
                let y = self.data();
                let mut gx = vec![0.0; y.len()];
                for o in 0..*outer {
                    for i in 0..*inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        let dot: f64 = (0..*len).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..*len {
                            gx[at(j)] = y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
                send(x, gx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = gain.len();
                let gw = gain.data();
                let mut gx = vec![0.0; x.len()];
                let mut ggain = vec![0.0; d];
                let mut gbias = vec![0.0; d];
                for (r, s) in rstd.iter().enumerate() {
                    let gr = &g[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    let mut mean_gh = 0.0;
                    let mut mean_ghh = 0.0;
                    for j in 0..d {
                        let gh = gr[j] * gw[j];
                        mean_gh += gh;
                        mean_ghh += gh * hr[j];
                        ggain[j] += gr[j] * hr[j];
                        gbias[j] += gr[j];
                    }
                    mean_gh /= d as f64;
                    mean_ghh /= d as f64;
                    for j in 0..d {
                        gx[r * d + j] = s * (gr[j] * gw[j] - mean_gh - hr[j] * mean_ghh);
                    }
                }
                send(x, gx);
                send(gain, ggain);
                send(bias, gbias);
            }
            Op::Gelu(x) => {
                let gx = x
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, gv)| gv * (std_normal_cdf(v) + v * std_normal_pdf(v)))
                    .collect();
                send(x, gx);
            }
            Op::Conv1d {
                x,
                weight,
                bias,
                geom,
            } => {
                let (c_in, len) = (x.0.shape[0], x.0.shape[1]);
                let [c_out, c_group, kernel] = weight.0.shape[..] else {
                    unreachable!("conv1d weight rank checked in forward")
                };
                let t_out = self.0.shape[1];
                let out_per_group = c_out / geom.groups;
                let (xd, wd) = (x.data(), weight.data());
                let mut gx = vec![0.0; c_in * len];
                let mut gw = vec![0.0; wd.len()];
                for o in 0..c_out {
                    let group = o / out_per_group;
                    let grow = &g[o * t_out..(o + 1) * t_out];
                    for cl in 0..c_group {
                        let ci = group * c_group + cl;
                        let woff = (o * c_group + cl) * kernel;
                        for (t, gv) in grow.iter().enumerate() {
                            if *gv == 0.0 {
                                continue;
                            }
                            let base = (t * geom.stride) as isize - geom.padding as isize;
                            for j in 0..kernel {
                                let p = base + j as isize;
                                if p >= 0 && (p as usize) < len {
                                    let xi = ci * len + p as usize;
                                    gx[xi] += gv * wd[woff + j];
                                    gw[woff + j] += gv * xd[xi];
                                }
                            }
                        }
                    }
                }
                send(x, gx);
                send(weight, gw);
                if let Some(b) = bias {
                    send(b, g.chunks(t_out).map(|row| row.iter().sum()).collect());
                }
            }
            Op::GatherRows(x, rows) => {
                let c = x.0.shape[1];
                let mut gx = vec![0.0; x.len()];
                for (i, &r) in rows.iter().enumerate() {
                    for j in 0..c {
                        gx[r * c + j] += g[i * c + j];
                    }
                }
                send(x, gx);
            }
            Op::ScatterRows {
                visible,
                fill,
                index,
            } => {
                let d = fill.len();
                let mut gv = vec![0.0; visible.len()];
                let mut gf = vec![0.0; d];
                for (t, slot) in index.iter().enumerate() {
                    let row = &g[t * d..(t + 1) * d];
                    let dst = match slot {
                        Some(i) => &mut gv[i * d..(i + 1) * d],
                        None => &mut gf[..],
                    };
                    dst.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                }
                send(visible, gv);
                send(fill, gf);
            }
            Op::SliceCols(x, start) => {
                let c = x.0.shape[1];
                let w = self.0.shape[1];
                let mut gx = vec![0.0; x.len()];
                for (i, row) in g.chunks(w).enumerate() {
                    gx[i * c + start..i * c + start + w].copy_from_slice(row);
                }
                send(x, gx);
            }
            Op::ConcatCols(parts) => {
                let total = self.0.shape[1];
                let mut offset = 0;
                for p in parts {
                    let w = p.0.shape[1];
                    let gp = g
                        .chunks(total)
                        .flat_map(|row| row[offset..offset + w].iter().copied())
                        .collect();
                    send(p, gp);
                    offset += w;
                }
            }
            Op::Sum(x) => send(x, vec![g[0]; x.len()]),
            Op::Mean(x) => send(x, vec![g[0] / x.len().max(1) as f64; x.len()]),
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let v = logits.0.shape[1];
                let scale = g[0] / targets.len() as f64;
                let mut gl: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (i, &t) in targets.iter().enumerate() {
                    gl[i * v + t] -= scale;
                }
                send(logits, gl);
            }
        }
    }
}

/// Mean and population variance of a slice.
pub fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var)
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            orow.iter_mut().zip(brow).for_each(|(o, bv)| *o += av * bv);
        }
    }
    out
}

fn transpose_raw(x: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = x[i * c + j];
        }
    }
    out
}
