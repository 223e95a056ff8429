//! Minimal dense `f64` tensor engine with reverse-mode automatic
//! differentiation.
//!
//! Tensors are row-major with explicit shapes; there is no implicit
//! broadcasting. Operations that combine tensors of different shapes exist as
//! dedicated ops with explicit semantics ([`Tensor::add_bias`],
//! [`Tensor::repeat_rows`]). Every op records its parents when gradients are
//! required, forming a DAG that [`Tensor::backward`] walks in reverse
//! topological order via a [`Tape`].
//!
//! Graphs are confined to one thread (`Tensor` is deliberately `!Send`);
//! independent graphs may live on independent threads.

pub mod checkpoint;
pub mod gradcheck;

use std::cell::{Ref, RefCell};
use std::collections::{HashMap, HashSet};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: index {index} out of range for extent {extent}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        extent: usize,
    },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("target row {row} sums to {sum:.9}, not a probability distribution")]
    InvalidDistribution { row: usize, sum: f64 },
    #[error("kl_div mask excludes every position")]
    AllMasked,
    #[error("checkpoint i/o failed: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

fn fresh_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// How a node pushes its output gradient to its parents.
enum Step {
    Leaf,
    Add,
    Mul,
    Scale(f64),
    Matmul,
    Transpose,
    AddBias,
    RepeatRows,
    Concat { axis: usize },
    Narrow { axis: usize, start: usize },
    Reshape,
    Embedding { ids: Vec<usize> },
    Softmax,
    LogSoftmax,
    Relu,
    Tanh,
    Sigmoid,
    LayerNorm { normalized: Vec<f64>, inv_std: Vec<f64> },
    Dropout { mask: Vec<f64> },
    Sum,
    KlDiv { row_weight: Vec<f64> },
}

struct Node {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    grad: RefCell<Option<Vec<f64>>>,
    requires_grad: bool,
    parents: Vec<Tensor>,
    step: Step,
}

/// Dense `f64` tensor, a shared handle into the autodiff graph.
///
/// Cloning is cheap (reference count); the underlying buffer is shared.
#[derive(Clone)]
pub struct Tensor(Rc<Node>);

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

impl Tensor {
    fn leaf(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Tensor {
        debug_assert_eq!(numel_of(&shape), data.len());
        Tensor(Rc::new(Node {
            id: fresh_id(),
            shape,
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad,
            parents: Vec::new(),
            step: Step::Leaf,
        }))
    }

    /// Result node; degrades to a constant leaf when no parent needs grads,
    /// so inference builds no graph.
    fn result(shape: Vec<usize>, data: Vec<f64>, parents: Vec<Tensor>, step: Step) -> Tensor {
        let requires_grad = parents.iter().any(|p| p.0.requires_grad);
        if !requires_grad {
            return Tensor::leaf(shape, data, false);
        }
        debug_assert_eq!(numel_of(&shape), data.len());
        Tensor(Rc::new(Node {
            id: fresh_id(),
            shape,
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad: true,
            parents,
            step,
        }))
    }

    /// Constant tensor from a flat row-major buffer.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        if numel_of(shape) != data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "from_vec",
                lhs: shape.to_vec(),
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor::leaf(shape.to_vec(), data, false))
    }

    /// Trainable parameter leaf.
    pub fn param(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        if numel_of(shape) != data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "param",
                lhs: shape.to_vec(),
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor::leaf(shape.to_vec(), data, true))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::leaf(shape.to_vec(), vec![0.0; numel_of(shape)], false)
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        Tensor::leaf(shape.to_vec(), vec![value; numel_of(shape)], false)
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::leaf(vec![1], vec![value], false)
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn numel(&self) -> usize {
        numel_of(&self.0.shape)
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Borrow the value buffer (row-major).
    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        self.0.data.borrow()
    }

    /// Copy of the value buffer.
    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.borrow().clone()
    }

    /// Value of a single-element tensor.
    ///
    /// Panics when the tensor holds more than one element.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.0.shape);
        self.0.data.borrow()[0]
    }

    /// Snapshot of the accumulated gradient, if any.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Multiply the accumulated gradient in place, e.g. for norm clipping.
    pub fn scale_grad(&self, factor: f64) {
        if let Some(g) = self.0.grad.borrow_mut().as_mut() {
            for x in g {
                *x *= factor;
            }
        }
    }

    /// Overwrite the value buffer. Length must match.
    pub fn set_data(&self, values: &[f64]) -> Result<()> {
        if values.len() != self.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "set_data",
                lhs: self.0.shape.clone(),
                rhs: vec![values.len()],
            });
        }
        self.0.data.borrow_mut().copy_from_slice(values);
        Ok(())
    }

    /// Overwrite one element; used by finite-difference probing and tests.
    pub fn set_elem(&self, index: usize, value: f64) {
        self.0.data.borrow_mut()[index] = value;
    }

    /// In-place update of the value buffer, e.g. an optimizer step.
    pub fn update_data(&self, f: impl FnOnce(&mut [f64])) {
        f(&mut self.0.data.borrow_mut());
    }

    fn accumulate_grad(&self, contribution: &[f64]) {
        let mut slot = self.0.grad.borrow_mut();
        match slot.as_mut() {
            Some(buf) => {
                for (g, c) in buf.iter_mut().zip(contribution) {
                    *g += c;
                }
            }
            None => *slot = Some(contribution.to_vec()),
        }
    }

    fn rank2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.0.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            _ => Err(TensorError::ShapeMismatch {
                op,
                lhs: self.0.shape.clone(),
                rhs: vec![],
            }),
        }
    }

    // ---- elementwise ----

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape() != other.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                lhs: self.0.shape.clone(),
                rhs: other.0.shape.clone(),
            });
        }
        let a = self.data();
        let b = other.data();
        let out: Vec<f64> = a.iter().zip(b.iter()).map(|(x, y)| x + y).collect();
        drop((a, b));
        Ok(Tensor::result(
            self.0.shape.clone(),
            out,
            vec![self.clone(), other.clone()],
            Step::Add,
        ))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.add(&other.scale(-1.0))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape() != other.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "mul",
                lhs: self.0.shape.clone(),
                rhs: other.0.shape.clone(),
            });
        }
        let a = self.data();
        let b = other.data();
        let out: Vec<f64> = a.iter().zip(b.iter()).map(|(x, y)| x * y).collect();
        drop((a, b));
        Ok(Tensor::result(
            self.0.shape.clone(),
            out,
            vec![self.clone(), other.clone()],
            Step::Mul,
        ))
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        let out: Vec<f64> = self.data().iter().map(|x| x * factor).collect();
        Tensor::result(
            self.0.shape.clone(),
            out,
            vec![self.clone()],
            Step::Scale(factor),
        )
    }

    pub fn relu(&self) -> Tensor {
        let out: Vec<f64> = self.data().iter().map(|x| x.max(0.0)).collect();
        Tensor::result(self.0.shape.clone(), out, vec![self.clone()], Step::Relu)
    }

    pub fn tanh(&self) -> Tensor {
        let out: Vec<f64> = self.data().iter().map(|x| x.tanh()).collect();
        Tensor::result(self.0.shape.clone(), out, vec![self.clone()], Step::Tanh)
    }

    pub fn sigmoid(&self) -> Tensor {
        let out: Vec<f64> = self.data().iter().map(|x| 1.0 / (1.0 + (-x).exp())).collect();
        Tensor::result(self.0.shape.clone(), out, vec![self.clone()], Step::Sigmoid)
    }

    // ---- linear algebra ----

    /// `(m,k) @ (k,n) -> (m,n)`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.rank2("matmul")?;
        let (k2, n) = other.rank2("matmul")?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: self.0.shape.clone(),
                rhs: other.0.shape.clone(),
            });
        }
        let mut out = vec![0.0; m * n];
        matmul_nn(&self.data(), &other.data(), m, k, n, &mut out);
        Ok(Tensor::result(
            vec![m, n],
            out,
            vec![self.clone(), other.clone()],
            Step::Matmul,
        ))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.rank2("transpose")?;
        let a = self.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = a[i * c + j];
            }
        }
        drop(a);
        Ok(Tensor::result(
            vec![c, r],
            out,
            vec![self.clone()],
            Step::Transpose,
        ))
    }

    /// `(n,d) + (d,)` row-wise bias.
    pub fn add_bias(&self, bias: &Tensor) -> Result<Tensor> {
        let (n, d) = self.rank2("add_bias")?;
        if bias.shape() != [d] {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                lhs: self.0.shape.clone(),
                rhs: bias.0.shape.clone(),
            });
        }
        let a = self.data();
        let b = bias.data();
        let mut out = Vec::with_capacity(n * d);
        for i in 0..n {
            for j in 0..d {
                out.push(a[i * d + j] + b[j]);
            }
        }
        drop((a, b));
        Ok(Tensor::result(
            vec![n, d],
            out,
            vec![self.clone(), bias.clone()],
            Step::AddBias,
        ))
    }

    /// Tile a `(1,d)` row into `(n,d)`; the explicit broadcast.
    pub fn repeat_rows(&self, n: usize) -> Result<Tensor> {
        let (r, d) = self.rank2("repeat_rows")?;
        if r != 1 {
            return Err(TensorError::ShapeMismatch {
                op: "repeat_rows",
                lhs: self.0.shape.clone(),
                rhs: vec![1, d],
            });
        }
        let row = self.data();
        let mut out = Vec::with_capacity(n * d);
        for _ in 0..n {
            out.extend_from_slice(&row);
        }
        drop(row);
        Ok(Tensor::result(
            vec![n, d],
            out,
            vec![self.clone()],
            Step::RepeatRows,
        ))
    }

    // ---- shape ----

    /// Concatenate rank-2 tensors along `axis` (0 = rows, 1 = columns).
    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        assert!(!parts.is_empty(), "concat of zero tensors");
        if axis > 1 {
            return Err(TensorError::IndexOutOfRange {
                op: "concat",
                index: axis,
                extent: 2,
            });
        }
        let (r0, c0) = parts[0].rank2("concat")?;
        let mut rows = r0;
        let mut cols = c0;
        for p in &parts[1..] {
            let (r, c) = p.rank2("concat")?;
            if axis == 0 {
                if c != c0 {
                    return Err(TensorError::ShapeMismatch {
                        op: "concat",
                        lhs: vec![r0, c0],
                        rhs: vec![r, c],
                    });
                }
                rows += r;
            } else {
                if r != r0 {
                    return Err(TensorError::ShapeMismatch {
                        op: "concat",
                        lhs: vec![r0, c0],
                        rhs: vec![r, c],
                    });
                }
                cols += c;
            }
        }
        let mut out = Vec::with_capacity(rows * cols);
        if axis == 0 {
            for p in parts {
                out.extend_from_slice(&p.data());
            }
        } else {
            for i in 0..rows {
                for p in parts {
                    let (_, c) = (p.0.shape[0], p.0.shape[1]);
                    let d = p.data();
                    out.extend_from_slice(&d[i * c..(i + 1) * c]);
                }
            }
        }
        Ok(Tensor::result(
            vec![rows, cols],
            out,
            parts.iter().map(|p| (*p).clone()).collect(),
            Step::Concat { axis },
        ))
    }

    /// Contiguous slice of `len` indices starting at `start` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        let (r, c) = self.rank2("narrow")?;
        let extent = if axis == 0 { r } else { c };
        if axis > 1 {
            return Err(TensorError::IndexOutOfRange {
                op: "narrow",
                index: axis,
                extent: 2,
            });
        }
        if start + len > extent {
            return Err(TensorError::IndexOutOfRange {
                op: "narrow",
                index: start + len,
                extent,
            });
        }
        let a = self.data();
        let (rows, cols) = if axis == 0 { (len, c) } else { (r, len) };
        let mut out = Vec::with_capacity(rows * cols);
        if axis == 0 {
            out.extend_from_slice(&a[start * c..(start + len) * c]);
        } else {
            for i in 0..r {
                out.extend_from_slice(&a[i * c + start..i * c + start + len]);
            }
        }
        drop(a);
        Ok(Tensor::result(
            vec![rows, cols],
            out,
            vec![self.clone()],
            Step::Narrow { axis, start },
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel_of(shape) != self.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.0.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Tensor::result(
            shape.to_vec(),
            self.to_vec(),
            vec![self.clone()],
            Step::Reshape,
        ))
    }

    /// Gather rows of an embedding table: `(V,d)` table, `ids` of length `n`
    /// produce `(n,d)`. Gradients scatter-add back into the table.
    pub fn embedding_lookup(&self, ids: &[usize]) -> Result<Tensor> {
        let (v, d) = self.rank2("embedding_lookup")?;
        for &id in ids {
            if id >= v {
                return Err(TensorError::IndexOutOfRange {
                    op: "embedding_lookup",
                    index: id,
                    extent: v,
                });
            }
        }
        let table = self.data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            out.extend_from_slice(&table[id * d..(id + 1) * d]);
        }
        drop(table);
        Ok(Tensor::result(
            vec![ids.len(), d],
            out,
            vec![self.clone()],
            Step::Embedding { ids: ids.to_vec() },
        ))
    }

    // ---- reductions & nonlinear rows ----

    /// Row-wise softmax with max-subtraction for stability (rank-2, last axis).
    pub fn softmax(&self) -> Result<Tensor> {
        let (r, c) = self.rank2("softmax")?;
        let a = self.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &a[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..c {
                let e = (row[j] - m).exp();
                out[i * c + j] = e;
                sum += e;
            }
            for j in 0..c {
                out[i * c + j] /= sum;
            }
        }
        drop(a);
        Ok(Tensor::result(
            vec![r, c],
            out,
            vec![self.clone()],
            Step::Softmax,
        ))
    }

    /// Row-wise log-softmax (rank-2, last axis).
    pub fn log_softmax(&self) -> Result<Tensor> {
        let (r, c) = self.rank2("log_softmax")?;
        let a = self.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &a[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            for j in 0..c {
                out[i * c + j] = row[j] - lse;
            }
        }
        drop(a);
        Ok(Tensor::result(
            vec![r, c],
            out,
            vec![self.clone()],
            Step::LogSoftmax,
        ))
    }

    /// Per-row normalization to zero mean / unit variance followed by the
    /// affine `gain * x + bias`; `eps = 1e-5` inside the square root.
    pub fn layer_norm(&self, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
        const EPS: f64 = 1e-5;
        let (n, h) = self.rank2("layer_norm")?;
        if h < 2 {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: self.0.shape.clone(),
                rhs: vec![n, 2],
            });
        }
        if gain.shape() != [h] || bias.shape() != [h] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: vec![h],
                rhs: gain.0.shape.clone(),
            });
        }
        let a = self.data();
        let g = gain.data();
        let b = bias.data();
        let mut normalized = vec![0.0; n * h];
        let mut inv_std = vec![0.0; n];
        let mut out = vec![0.0; n * h];
        for i in 0..n {
            let row = &a[i * h..(i + 1) * h];
            let mean = row.iter().sum::<f64>() / h as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / h as f64;
            let inv = 1.0 / (var + EPS).sqrt();
            inv_std[i] = inv;
            for j in 0..h {
                let xhat = (row[j] - mean) * inv;
                normalized[i * h + j] = xhat;
                out[i * h + j] = g[j] * xhat + b[j];
            }
        }
        drop((a, g, b));
        Ok(Tensor::result(
            vec![n, h],
            out,
            vec![self.clone(), gain.clone(), bias.clone()],
            Step::LayerNorm {
                normalized,
                inv_std,
            },
        ))
    }

    /// Inverted-scaling dropout mask drawn from `rng`; training mode only.
    /// Callers skip the op entirely at inference.
    pub fn dropout(&self, rate: f64, rng: &mut impl rand::Rng) -> Tensor {
        assert!((0.0..1.0).contains(&rate), "dropout rate {rate} out of [0,1)");
        if rate == 0.0 {
            return self.clone();
        }
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.numel())
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let out: Vec<f64> = self
            .data()
            .iter()
            .zip(&mask)
            .map(|(x, m)| x * m)
            .collect();
        Tensor::result(
            self.0.shape.clone(),
            out,
            vec![self.clone()],
            Step::Dropout { mask },
        )
    }

    /// Sum of all elements, as a scalar tensor.
    pub fn sum(&self) -> Tensor {
        let total: f64 = self.data().iter().sum();
        Tensor::result(vec![1], vec![total], vec![self.clone()], Step::Sum)
    }

    /// KL divergence `mean_i sum_x P(x) (log P(x) - log Q(x))` between target
    /// rows `P` and predicted log-probabilities `log Q` (= `self`), averaged
    /// over unmasked rows. `mask[i] = true` excludes row `i` (e.g. padding).
    /// Uses the convention `0 * log 0 = 0`.
    pub fn kl_div(&self, target_probs: &Tensor, mask: Option<&[bool]>) -> Result<Tensor> {
        let (n, v) = self.rank2("kl_div")?;
        if target_probs.shape() != [n, v] {
            return Err(TensorError::ShapeMismatch {
                op: "kl_div",
                lhs: self.0.shape.clone(),
                rhs: target_probs.0.shape.clone(),
            });
        }
        if let Some(m) = mask {
            if m.len() != n {
                return Err(TensorError::ShapeMismatch {
                    op: "kl_div",
                    lhs: vec![n],
                    rhs: vec![m.len()],
                });
            }
        }
        let included = |i: usize| mask.map_or(true, |m| !m[i]);
        let count = (0..n).filter(|&i| included(i)).count();
        if count == 0 {
            return Err(TensorError::AllMasked);
        }
        let p = target_probs.data();
        for i in (0..n).filter(|&i| included(i)) {
            let sum: f64 = p[i * v..(i + 1) * v].iter().sum();
            if (sum - 1.0).abs() > 1e-6 {
                return Err(TensorError::InvalidDistribution { row: i, sum });
            }
        }
        let lq = self.data();
        let w = 1.0 / count as f64;
        let mut total = 0.0;
        let mut row_weight = vec![0.0; n];
        for i in 0..n {
            if !included(i) {
                continue;
            }
            row_weight[i] = w;
            for x in 0..v {
                let px = p[i * v + x];
                if px > 0.0 {
                    total += px * (px.ln() - lq[i * v + x]);
                }
            }
        }
        drop((p, lq));
        Ok(Tensor::result(
            vec![1],
            vec![total * w],
            vec![self.clone(), target_probs.clone()],
            Step::KlDiv { row_weight },
        ))
    }

    // ---- backward ----

    /// Reverse-mode gradient accumulation from a scalar loss. Every
    /// `requires_grad` tensor reachable from `self` receives (adds) its
    /// `d loss / d tensor`. Repeated calls accumulate until grads are zeroed.
    ///
    /// Each call propagates through a fresh workspace, so earlier
    /// accumulated gradients are never re-propagated.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(TensorError::NonScalarLoss(self.0.shape.clone()));
        }
        let tape = Tape::from_root(self);
        let mut work: HashMap<u64, Vec<f64>> = HashMap::new();
        work.insert(self.0.id, vec![1.0]);
        for node in tape.nodes.iter().rev() {
            // Reverse topological order: by the time a node is visited its
            // workspace gradient is complete.
            let Some(grad) = work.remove(&node.0.id) else {
                continue;
            };
            node.propagate(&grad, &mut work);
            node.accumulate_grad(&grad);
        }
        Ok(())
    }
}

fn add_grad(work: &mut HashMap<u64, Vec<f64>>, target: &Tensor, contribution: &[f64]) {
    let entry = work
        .entry(target.0.id)
        .or_insert_with(|| vec![0.0; target.numel()]);
    for (a, b) in entry.iter_mut().zip(contribution) {
        *a += b;
    }
}

/// Ordered record of the graph reachable from a root, leaves first. Backward
/// walks it once, in reverse.
pub struct Tape {
    nodes: Vec<Tensor>,
}

impl Tape {
    /// Topological order via iterative post-order DFS over parents.
    pub fn from_root(root: &Tensor) -> Tape {
        let mut nodes = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        // (tensor, parents_scheduled)
        let mut stack: Vec<(Tensor, bool)> = vec![(root.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                nodes.push(t);
                continue;
            }
            if !visited.insert(t.0.id) {
                continue;
            }
            stack.push((t.clone(), true));
            for p in &t.0.parents {
                if p.0.requires_grad && !visited.contains(&p.0.id) {
                    stack.push((p.clone(), false));
                }
            }
        }
        Tape { nodes }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Node ids in topological order; exposed for graph-shape assertions.
    pub fn node_ids(&self) -> Vec<u64> {
        self.nodes.iter().map(|t| t.0.id).collect()
    }
}

impl Tensor {
    /// Push this node's workspace gradient to its parents' workspace slots.
    fn propagate(&self, g: &[f64], work: &mut HashMap<u64, Vec<f64>>) {
        let node = &self.0;
        if node.parents.is_empty() {
            return;
        }
        let parents = &node.parents;
        let wants = |i: usize| parents[i].0.requires_grad;
        match &node.step {
            Step::Leaf => {}
            Step::Add => {
                if wants(0) {
                    add_grad(work, &parents[0], &g);
                }
                if wants(1) {
                    add_grad(work, &parents[1], &g);
                }
            }
            Step::Mul => {
                if wants(0) {
                    let b = parents[1].data();
                    let contrib: Vec<f64> = g.iter().zip(b.iter()).map(|(x, y)| x * y).collect();
                    drop(b);
                    add_grad(work, &parents[0], &contrib);
                }
                if wants(1) {
                    let a = parents[0].data();
                    let contrib: Vec<f64> = g.iter().zip(a.iter()).map(|(x, y)| x * y).collect();
                    drop(a);
                    add_grad(work, &parents[1], &contrib);
                }
            }
            Step::Scale(factor) => {
                if wants(0) {
                    let contrib: Vec<f64> = g.iter().map(|x| x * factor).collect();
                    add_grad(work, &parents[0], &contrib);
                }
            }
            Step::Matmul => {
                let (m, k) = (parents[0].0.shape[0], parents[0].0.shape[1]);
                let n = parents[1].0.shape[1];
                if wants(0) {
                    // dA = g @ B^T
                    let mut da = vec![0.0; m * k];
                    matmul_nt(g, &parents[1].data(), m, n, k, &mut da);
                    add_grad(work, &parents[0], &da);
                }
                if wants(1) {
                    // dB = A^T @ g
                    let mut db = vec![0.0; k * n];
                    matmul_tn(&parents[0].data(), g, m, k, n, &mut db);
                    add_grad(work, &parents[1], &db);
                }
            }
            Step::Transpose => {
                if wants(0) {
                    let (r, c) = (node.shape[0], node.shape[1]);
                    let mut contrib = vec![0.0; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            contrib[j * r + i] = g[i * c + j];
                        }
                    }
                    add_grad(work, &parents[0], &contrib);
                }
            }
            Step::AddBias => {
                let (n, d) = (node.shape[0], node.shape[1]);
                if wants(0) {
                    add_grad(work, &parents[0], &g);
                }
                if wants(1) {
                    let mut db = vec![0.0; d];
                    for i in 0..n {
                        for j in 0..d {
                            db[j] += g[i * d + j];
                        }
                    }
                    add_grad(work, &parents[1], &db);
                }
            }
            Step::RepeatRows => {
                if wants(0) {
                    let (n, d) = (node.shape[0], node.shape[1]);
                    let mut contrib = vec![0.0; d];
                    for i in 0..n {
                        for j in 0..d {
                            contrib[j] += g[i * d + j];
                        }
                    }
                    add_grad(work, &parents[0], &contrib);
                }
            }
            Step::Concat { axis } => {
                let cols = node.shape[1];
                let mut offset = 0;
                for p in parents {
                    let (pr, pc) = (p.0.shape[0], p.0.shape[1]);
                    if p.0.requires_grad {
                        let mut contrib = Vec::with_capacity(pr * pc);
                        if *axis == 0 {
                            contrib.extend_from_slice(&g[offset * cols..(offset + pr) * cols]);
                        } else {
                            for i in 0..pr {
                                contrib
                                    .extend_from_slice(&g[i * cols + offset..i * cols + offset + pc]);
                            }
                        }
                        add_grad(work, p, &contrib);
                    }
                    offset += if *axis == 0 { pr } else { pc };
                }
            }
            Step::Narrow { axis, start } => {
                if wants(0) {
                    let (pr, pc) = (parents[0].0.shape[0], parents[0].0.shape[1]);
                    let (nr, nc) = (node.shape[0], node.shape[1]);
                    let mut contrib = vec![0.0; pr * pc];
                    if *axis == 0 {
                        contrib[start * pc..(start + nr) * pc].copy_from_slice(g);
                    } else {
                        for i in 0..nr {
                            contrib[i * pc + start..i * pc + start + nc]
                                .copy_from_slice(&g[i * nc..(i + 1) * nc]);
                        }
                    }
                    add_grad(work, &parents[0], &contrib);
                }
            }
            Step::Reshape => {
                if wants(0) {
                    add_grad(work, &parents[0], &g);
                }
            }
            Step::Embedding { ids } => {
                if wants(0) {
                    let (v, d) = (parents[0].0.shape[0], parents[0].0.shape[1]);
                    let mut contrib = vec![0.0; v * d];
                    for (row, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            contrib[id * d + j] += g[row * d + j];
                        }
                    }
                    add_grad(work, &parents[0], &contrib);
                }
            }
            Step::Softmax => {
                if wants(0) {
                    let (r, c) = (node.shape[0], node.shape[1]);
                    let s = node.data.borrow();
                    let mut contrib = vec![0.0; r * c];
                    for i in 0..r {
                        let srow = &s[i * c..(i + 1) * c];
                        let grow = &g[i * c..(i + 1) * c];
                        let dot: f64 = srow.iter().zip(grow).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            contrib[i * c + j] = srow[j] * (grow[j] - dot);
                        }
                    }
                    drop(s);
                    add_grad(work, &parents[0], &contrib);
                }
            }
            Step::LogSoftmax => {
                if wants(0) {
                    let (r, c) = (node.shape[0], node.shape[1]);
                    let out = node.data.borrow();
                    let mut contrib = vec![0.0; r * c];
                    for i in 0..r {
                        let orow = &out[i * c..(i + 1) * c];
                        let grow = &g[i * c..(i + 1) * c];
                        let gsum: f64 = grow.iter().sum();
                        for j in 0..c {
                            contrib[i * c + j] = grow[j] - orow[j].exp() * gsum;
                        }
                    }
                    drop(out);
                    add_grad(work, &parents[0], &contrib);
                }
            }
            Step::Relu => {
                if wants(0) {
                    let x = parents[0].data();
                    let contrib: Vec<f64> = g
                        .iter()
                        .zip(x.iter())
                        .map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 })
                        .collect();
                    drop(x);
                    add_grad(work, &parents[0], &contrib);
                }
            }
            Step::Tanh => {
                if wants(0) {
                    let y = node.data.borrow();
                    let contrib: Vec<f64> =
                        g.iter().zip(y.iter()).map(|(gv, yv)| gv * (1.0 - yv * yv)).collect();
                    drop(y);
                    add_grad(work, &parents[0], &contrib);
                }
            }
            Step::Sigmoid => {
                if wants(0) {
                    let y = node.data.borrow();
                    let contrib: Vec<f64> = g
                        .iter()
                        .zip(y.iter())
                        .map(|(gv, yv)| gv * yv * (1.0 - yv))
                        .collect();
                    drop(y);
                    add_grad(work, &parents[0], &contrib);
                }
            }
            Step::LayerNorm {
                normalized,
                inv_std,
            } => {
                let (n, h) = (node.shape[0], node.shape[1]);
                let gain = parents[1].data();
                if wants(0) {
                    let mut contrib = vec![0.0; n * h];
                    for i in 0..n {
                        let xhat = &normalized[i * h..(i + 1) * h];
                        let grow = &g[i * h..(i + 1) * h];
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..h {
                            let dxhat = grow[j] * gain[j];
                            m1 += dxhat;
                            m2 += dxhat * xhat[j];
                        }
                        m1 /= h as f64;
                        m2 /= h as f64;
                        for j in 0..h {
                            let dxhat = grow[j] * gain[j];
                            contrib[i * h + j] = inv_std[i] * (dxhat - m1 - xhat[j] * m2);
                        }
                    }
                    add_grad(work, &parents[0], &contrib);
                }
                drop(gain);
                if wants(1) {
                    let mut dg = vec![0.0; h];
                    for i in 0..n {
                        for j in 0..h {
                            dg[j] += g[i * h + j] * normalized[i * h + j];
                        }
                    }
                    add_grad(work, &parents[1], &dg);
                }
                if wants(2) {
                    let mut db = vec![0.0; h];
                    for i in 0..n {
                        for j in 0..h {
                            db[j] += g[i * h + j];
                        }
                    }
                    add_grad(work, &parents[2], &db);
                }
            }
            Step::Dropout { mask } => {
                if wants(0) {
                    let contrib: Vec<f64> =
                        g.iter().zip(mask.iter()).map(|(gv, m)| gv * m).collect();
                    add_grad(work, &parents[0], &contrib);
                }
            }
            Step::Sum => {
                if wants(0) {
                    let contrib = vec![g[0]; parents[0].numel()];
                    add_grad(work, &parents[0], &contrib);
                }
            }
            Step::KlDiv { row_weight } => {
                if wants(0) {
                    let (n, v) = (parents[0].0.shape[0], parents[0].0.shape[1]);
                    let p = parents[1].data();
                    let mut contrib = vec![0.0; n * v];
                    for i in 0..n {
                        let w = row_weight[i];
                        if w == 0.0 {
                            continue;
                        }
                        for x in 0..v {
                            contrib[i * v + x] = -g[0] * w * p[i * v + x];
                        }
                    }
                    drop(p);
                    add_grad(work, &parents[0], &contrib);
                }
            }
        }
    }
}

/// `C += A (m,k) @ B (k,n)`.
fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
}

/// `C += A (m,k) @ B^T` where `B` is `(n,k)`; result `(m,n)`.
fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for kk in 0..k {
                acc += arow[kk] * brow[kk];
            }
            out[i * n + j] += acc;
        }
    }
}

/// `C += A^T @ B` where `A` is `(m,k)`, `B` is `(m,n)`; result `(k,n)`.
fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            let crow = &mut out[kk * n..(kk + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let eye = t(&[3, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let a = t(&[3, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]);
        let out = eye.matmul(&a).unwrap();
        assert_eq!(out.to_vec(), a.to_vec());
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = t(&[2, 3], &[0.0; 6]);
        let b = t(&[2, 3], &[0.0; 6]);
        assert!(matches!(
            a.matmul(&b),
            Err(TensorError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn concat_axis1_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 5]);
        let c = Tensor::concat(&[&a, &b], 1).unwrap();
        assert_eq!(c.shape(), &[2, 8]);
    }

    #[test]
    fn softmax_uniform_and_closed_form() {
        let x = t(&[1, 4], &[2.0, 2.0, 2.0, 2.0]);
        let s = x.softmax().unwrap();
        for v in s.to_vec() {
            assert!((v - 0.25).abs() < 1e-15);
        }
        let x = t(&[1, 2], &[0.0, 3.0f64.ln()]);
        let s = x.softmax().unwrap();
        let v = s.to_vec();
        assert!((v[0] - 0.25).abs() < 1e-12);
        assert!((v[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_large_input_stable() {
        let x = t(&[1, 3], &[0.0, 1000.0, 0.0]);
        let s = x.softmax().unwrap();
        let v = s.to_vec();
        assert!(v.iter().all(|x| x.is_finite()));
        assert!((v[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut data = Vec::new();
        let mut state = 1234u64;
        for _ in 0..40 {
            state = crate::util::splitmix64(state);
            data.push((state % 1000) as f64 / 100.0 - 5.0);
        }
        let x = t(&[8, 5], &data);
        let s = x.softmax().unwrap();
        let v = s.to_vec();
        for i in 0..8 {
            let sum: f64 = v[i * 5..(i + 1) * 5].iter().sum();
            assert!((sum - 1.0).abs() < 1e-12, "row {i} sums to {sum}");
        }
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let x = t(&[1, 4], &[3.0, 3.0, 3.0, 3.0]);
        let gain = Tensor::full(&[4], 1.0);
        let bias = Tensor::zeros(&[4]);
        let y = x.layer_norm(&gain, &bias).unwrap();
        for v in y.to_vec() {
            assert!(v.abs() < 1e-9);
        }
    }

    #[test]
    fn layer_norm_standardizes() {
        let x = t(&[2, 8], &[1.0, -2.0, 0.5, 7.0, 3.0, -1.0, 2.0, 0.0, 5.0, 5.5, -3.0, 2.0, 1.0, 0.0, -4.0, 8.0]);
        let gain = Tensor::full(&[8], 1.0);
        let bias = Tensor::zeros(&[8]);
        let y = x.layer_norm(&gain, &bias).unwrap();
        let v = y.to_vec();
        for i in 0..2 {
            let row = &v[i * 8..(i + 1) * 8];
            let mean: f64 = row.iter().sum::<f64>() / 8.0;
            let var: f64 = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn kl_div_identical_distributions_is_zero() {
        let p = t(&[1, 2], &[0.3, 0.7]);
        let lq = t(&[1, 2], &[0.3f64.ln(), 0.7f64.ln()]);
        let kl = lq.kl_div(&p, None).unwrap();
        assert!(kl.item().abs() < 1e-12);
    }

    #[test]
    fn kl_div_closed_forms() {
        // P = [1, 0], Q = [0.5, 0.5]: 1 * ln(1/0.5) = ln 2, with 0*log 0 = 0.
        let p = t(&[1, 2], &[1.0, 0.0]);
        let lq = t(&[1, 2], &[0.5f64.ln(), 0.5f64.ln()]);
        let kl = lq.kl_div(&p, None).unwrap();
        assert!((kl.item() - 2.0f64.ln()).abs() < 1e-12);

        // P = [0.9, 0.1], Q = [0.5, 0.5]: 0.9 ln 1.8 + 0.1 ln 0.2.
        let p = t(&[1, 2], &[0.9, 0.1]);
        let lq = t(&[1, 2], &[0.5f64.ln(), 0.5f64.ln()]);
        let kl = lq.kl_div(&p, None).unwrap();
        let expected = 0.9 * 1.8f64.ln() + 0.1 * 0.2f64.ln();
        assert!((kl.item() - expected).abs() < 1e-12);
        assert!((expected - 0.3681).abs() < 1e-4);
    }

    #[test]
    fn kl_div_rejects_non_distribution() {
        let p = t(&[1, 2], &[0.5, 0.6]);
        let lq = t(&[1, 2], &[0.5f64.ln(), 0.5f64.ln()]);
        assert!(matches!(
            lq.kl_div(&p, None),
            Err(TensorError::InvalidDistribution { row: 0, .. })
        ));
    }

    #[test]
    fn kl_div_mask_excludes_rows() {
        // Row 1 is garbage but masked out.
        let p = t(&[2, 2], &[1.0, 0.0, 9.0, 9.0]);
        let lq = t(&[2, 2], &[0.5f64.ln(), 0.5f64.ln(), 0.0, 0.0]);
        let kl = lq.kl_div(&p, Some(&[false, true])).unwrap();
        assert!((kl.item() - 2.0f64.ln()).abs() < 1e-12);
        assert!(matches!(
            lq.kl_div(&p, Some(&[true, true])),
            Err(TensorError::AllMasked)
        ));
    }

    #[test]
    fn backward_linear_chain() {
        let x = Tensor::param(&[1], vec![2.0]).unwrap();
        let y = x.scale(3.0);
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![3.0]);
    }

    #[test]
    fn backward_branching_graph_sums() {
        // y = x*x + x  =>  dy/dx = 2x + 1 = 5 at x=2
        let x = Tensor::param(&[1], vec![2.0]).unwrap();
        let y = x.mul(&x).unwrap().add(&x).unwrap();
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![5.0]);
    }

    #[test]
    fn backward_accumulates_until_zeroed() {
        let x = Tensor::param(&[1], vec![1.0]).unwrap();
        let y = x.scale(3.0);
        y.backward().unwrap();
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![6.0]);
        x.zero_grad();
        assert!(x.grad().is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let x = Tensor::param(&[2], vec![1.0, 2.0]).unwrap();
        let y = x.scale(2.0);
        assert!(matches!(
            y.backward(),
            Err(TensorError::NonScalarLoss(_))
        ));
    }

    #[test]
    fn tape_visits_each_node_once() {
        let x = Tensor::param(&[1], vec![2.0]).unwrap();
        let a = x.mul(&x).unwrap();
        let b = a.add(&x).unwrap();
        let loss = b.mul(&a).unwrap().sum();
        let tape = Tape::from_root(&loss);
        let ids = tape.node_ids();
        let mut dedup = ids.clone();
        dedup.sort_unstable();
        dedup.dedup();
        assert_eq!(ids.len(), dedup.len(), "tape repeats a node");
        // Parents precede children.
        let pos =
            |id: u64| ids.iter().position(|&x| x == id).expect("node missing from tape");
        for t in [&a, &b, &loss] {
            for p in &t.0.parents {
                assert!(pos(p.0.id) < pos(t.0.id));
            }
        }
    }

    #[test]
    fn narrow_and_concat_roundtrip() {
        let x = t(&[2, 4], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        let left = x.narrow(1, 0, 2).unwrap();
        let right = x.narrow(1, 2, 2).unwrap();
        let back = Tensor::concat(&[&left, &right], 1).unwrap();
        assert_eq!(back.to_vec(), x.to_vec());
        let top = x.narrow(0, 0, 1).unwrap();
        let bottom = x.narrow(0, 1, 1).unwrap();
        let back = Tensor::concat(&[&top, &bottom], 0).unwrap();
        assert_eq!(back.to_vec(), x.to_vec());
    }

    #[test]
    fn embedding_lookup_gathers_rows() {
        let table = t(&[3, 2], &[0.0, 0.1, 1.0, 1.1, 2.0, 2.1]);
        let out = table.embedding_lookup(&[2, 0, 2]).unwrap();
        assert_eq!(out.shape(), &[3, 2]);
        assert_eq!(out.to_vec(), vec![2.0, 2.1, 0.0, 0.1, 2.0, 2.1]);
        assert!(table.embedding_lookup(&[3]).is_err());
    }

    #[test]
    fn dropout_zero_rate_is_identity() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let x = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let y = x.dropout(0.0, &mut rng);
        assert_eq!(y.to_vec(), x.to_vec());
    }
}
