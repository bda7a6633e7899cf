//! Minimal define-by-run reverse-mode automatic differentiation over dense
//! `f64` tensors.
//!
//! Every operation records its parents; [`backward`] walks the recorded graph
//! in reverse creation order, which is a valid topological order because a
//! node can only be built from nodes that already exist. Evaluation order is
//! fixed, so gradients are bit-reproducible run to run.

use std::cell::RefCell;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

enum DetachMode {
    Normal,
    Record(Vec<Tensor>),
    Replay(Vec<Tensor>, usize),
}

thread_local! {
    static DETACHED: RefCell<DetachMode> = const { RefCell::new(DetachMode::Normal) };
}

fn with_mode<R>(mode: DetachMode, f: impl FnOnce() -> R) -> (R, DetachMode) {
    let prev = DETACHED.with(|d| std::mem::replace(&mut *d.borrow_mut(), mode));
    let out = f();
    let used = DETACHED.with(|d| std::mem::replace(&mut *d.borrow_mut(), prev));
    (out, used)
}

/// Runs `f`, returning the values of every [`Var::detach`] call it made, in
/// call order.
pub fn record_detached<R>(f: impl FnOnce() -> R) -> (R, Vec<Tensor>) {
    match with_mode(DetachMode::Record(Vec::new()), f) {
        (out, DetachMode::Record(values)) => (out, values),
        _ => unreachable!("detach mode changed during recording"),
    }
}

/// Runs `f` with its detached values pinned to `values`, so that stop-gradient
/// targets stay fixed while the graph's parameters are perturbed.
pub fn replay_detached<R>(values: &[Tensor], f: impl FnOnce() -> R) -> R {
    let (out, used) = with_mode(DetachMode::Replay(values.to_vec(), 0), f);
    if let DetachMode::Replay(_, n) = used {
        assert_eq!(n, values.len(), "replay consumed {n} of {} detached values", values.len());
    }
    out
}

/// Dense row-major tensor. A scalar has an empty shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor data length does not match shape {shape:?}"
        );
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self::new(shape.to_vec(), vec![value; shape.iter().product()])
    }

    pub fn scalar(value: f64) -> Self {
        Self::new(Vec::new(), vec![value])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rows(&self) -> usize {
        assert_eq!(self.shape.len(), 2);
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        assert_eq!(self.shape.len(), 2);
        self.shape[1]
    }

    pub fn at2(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.shape[1] + j]
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on a non-scalar tensor");
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// A node in the computation graph. Cloning is cheap (reference counted).
#[derive(Clone)]
pub struct Var(Rc<Node>);

struct Node {
    id: u64,
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    SumAxis(Var, usize),
    SumAll(Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Gelu(Var),
    Softplus(Var),
    HuberSq(Var, f64),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    IndexRows(Var, Vec<usize>),
    NarrowCols(Var, usize),
    Concat(Vec<Var>, usize),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
        probs: Vec<f64>,
    },
}

impl fmt::Debug for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.0.id)
            .field("shape", &self.0.value.shape)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

impl Var {
    fn from_op(value: Tensor, op: Op, parents_require_grad: bool) -> Var {
        let op = if parents_require_grad { op } else { Op::Leaf };
        Var(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            value,
            requires_grad: parents_require_grad,
            op,
        }))
    }

    /// A leaf that does not receive gradients.
    pub fn constant(value: Tensor) -> Var {
        Self::from_op(value, Op::Leaf, false)
    }

    /// A leaf whose gradient is reported by [`backward`].
    pub fn param(value: Tensor) -> Var {
        Var(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            value,
            requires_grad: true,
            op: Op::Leaf,
        }))
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn value(&self) -> &Tensor {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.value.shape
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Same value, cut from the graph. Inside [`replay_detached`] the value
    /// recorded at the same position by [`record_detached`] is returned
    /// instead.
    pub fn detach(&self) -> Var {
        DETACHED.with(|d| match &mut *d.borrow_mut() {
            DetachMode::Normal => Var::constant(self.0.value.clone()),
            DetachMode::Record(values) => {
                values.push(self.0.value.clone());
                Var::constant(self.0.value.clone())
            }
            DetachMode::Replay(values, next) => {
                let v = values
                    .get(*next)
                    .unwrap_or_else(|| panic!("replay has no detached value #{next}"));
                assert_eq!(v.shape, self.0.value.shape, "replayed detached value has a different shape");
                *next += 1;
                Var::constant(v.clone())
            }
        })
    }

    pub fn add(&self, other: &Var) -> Var {
        let value = broadcast_map(self.value(), other.value(), |a, b| a + b);
        let rg = self.requires_grad() || other.requires_grad();
        Var::from_op(value, Op::Add(self.clone(), other.clone()), rg)
    }

    pub fn sub(&self, other: &Var) -> Var {
        let value = broadcast_map(self.value(), other.value(), |a, b| a - b);
        let rg = self.requires_grad() || other.requires_grad();
        Var::from_op(value, Op::Sub(self.clone(), other.clone()), rg)
    }

    pub fn mul(&self, other: &Var) -> Var {
        let value = broadcast_map(self.value(), other.value(), |a, b| a * b);
        let rg = self.requires_grad() || other.requires_grad();
        Var::from_op(value, Op::Mul(self.clone(), other.clone()), rg)
    }

    pub fn div(&self, other: &Var) -> Var {
        let value = broadcast_map(self.value(), other.value(), |a, b| a / b);
        let rg = self.requires_grad() || other.requires_grad();
        Var::from_op(value, Op::Div(self.clone(), other.clone()), rg)
    }

    /// `(m×k)·(k×n)`.
    pub fn matmul(&self, other: &Var) -> Var {
        let (a, b) = (self.value(), other.value());
        assert!(
            a.shape.len() == 2 && b.shape.len() == 2 && a.shape[1] == b.shape[0],
            "matmul shape mismatch {:?} x {:?}",
            a.shape,
            b.shape
        );
        let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, &a.data, (k, 1), &b.data, (n, 1), &mut out, 0.0);
        let rg = self.requires_grad() || other.requires_grad();
        Var::from_op(
            Tensor::new(vec![m, n], out),
            Op::MatMul(self.clone(), other.clone()),
            rg,
        )
    }

    pub fn transpose(&self) -> Var {
        let a = self.value();
        assert_eq!(a.shape.len(), 2, "transpose expects a matrix");
        let (m, n) = (a.shape[0], a.shape[1]);
        let value = Tensor::new(vec![n, m], transpose_data(&a.data, m, n));
        Var::from_op(value, Op::Transpose(self.clone()), self.requires_grad())
    }

    pub fn reshape(&self, shape: &[usize]) -> Var {
        let value = Tensor::new(shape.to_vec(), self.value().data.clone());
        Var::from_op(value, Op::Reshape(self.clone()), self.requires_grad())
    }

    /// Sums out `axis`, removing it from the shape.
    pub fn sum_axis(&self, axis: usize) -> Var {
        let a = self.value();
        let (outer, len, inner) = axis_split(&a.shape, axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &a.data[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (dst, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *dst += s;
                }
            }
        }
        let mut shape = a.shape.clone();
        shape.remove(axis);
        Var::from_op(
            Tensor::new(shape, out),
            Op::SumAxis(self.clone(), axis),
            self.requires_grad(),
        )
    }

    pub fn sum(&self) -> Var {
        let total = self.value().data.iter().sum();
        Var::from_op(
            Tensor::scalar(total),
            Op::SumAll(self.clone()),
            self.requires_grad(),
        )
    }

    pub fn scale(&self, c: f64) -> Var {
        let value = map(self.value(), |v| v * c);
        Var::from_op(value, Op::Scale(self.clone(), c), self.requires_grad())
    }

    pub fn add_scalar(&self, c: f64) -> Var {
        let value = map(self.value(), |v| v + c);
        Var::from_op(value, Op::AddScalar(self.clone()), self.requires_grad())
    }

    pub fn square(&self) -> Var {
        self.mul(self)
    }

    pub fn exp(&self) -> Var {
        Var::from_op(
            map(self.value(), f64::exp),
            Op::Exp(self.clone()),
            self.requires_grad(),
        )
    }

    pub fn ln(&self) -> Var {
        Var::from_op(
            map(self.value(), f64::ln),
            Op::Log(self.clone()),
            self.requires_grad(),
        )
    }

    pub fn sqrt(&self) -> Var {
        Var::from_op(
            map(self.value(), f64::sqrt),
            Op::Sqrt(self.clone()),
            self.requires_grad(),
        )
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&self) -> Var {
        Var::from_op(
            map(self.value(), gelu),
            Op::Gelu(self.clone()),
            self.requires_grad(),
        )
    }

    pub fn softplus(&self) -> Var {
        Var::from_op(
            map(self.value(), softplus),
            Op::Softplus(self.clone()),
            self.requires_grad(),
        )
    }

    /// Huber loss evaluated on a squared norm `s = ‖r‖²` with threshold `delta`:
    /// `s/2` when `s < delta²`, otherwise `delta·(√s − delta/2)`.
    pub fn huber_from_squared(&self, delta: f64) -> Var {
        let value = map(self.value(), |s| huber_sq(s, delta));
        Var::from_op(
            value,
            Op::HuberSq(self.clone(), delta),
            self.requires_grad(),
        )
    }

    /// Softmax over the last axis.
    pub fn softmax(&self) -> Var {
        let a = self.value();
        let width = *a.shape.last().expect("softmax on a scalar");
        let mut out = a.data.clone();
        for row in out.chunks_mut(width) {
            softmax_in_place(row);
        }
        Var::from_op(
            Tensor::new(a.shape.clone(), out),
            Op::Softmax(self.clone()),
            self.requires_grad(),
        )
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`
    /// (each shaped `[width]` or `[1, width]`).
    pub fn layer_norm(&self, gamma: &Var, beta: &Var, eps: f64) -> Var {
        let a = self.value();
        let width = *a.shape.last().expect("layer_norm on a scalar");
        assert_eq!(gamma.value().len(), width);
        assert_eq!(beta.value().len(), width);
        let g = &gamma.value().data;
        let b = &beta.value().data;
        let rows = a.len() / width;
        let mut xhat = vec![0.0; a.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; a.len()];
        for r in 0..rows {
            let x = &a.data[r * width..(r + 1) * width];
            let mean = x.iter().sum::<f64>() / width as f64;
            let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / width as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..width {
                let h = (x[c] - mean) * is;
                xhat[r * width + c] = h;
                out[r * width + c] = h * g[c] + b[c];
            }
        }
        let rg = self.requires_grad() || gamma.requires_grad() || beta.requires_grad();
        Var::from_op(
            Tensor::new(a.shape.clone(), out),
            Op::LayerNorm {
                x: self.clone(),
                gamma: gamma.clone(),
                beta: beta.clone(),
                xhat,
                inv_std,
            },
            rg,
        )
    }

    /// Gathers rows of a matrix: `out[r] = self[indices[r]]`.
    pub fn index_rows(&self, indices: &[usize]) -> Var {
        let a = self.value();
        assert_eq!(a.shape.len(), 2, "index_rows expects a matrix");
        let cols = a.shape[1];
        let mut out = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            assert!(i < a.shape[0], "row index {i} out of range {}", a.shape[0]);
            out.extend_from_slice(&a.data[i * cols..(i + 1) * cols]);
        }
        Var::from_op(
            Tensor::new(vec![indices.len(), cols], out),
            Op::IndexRows(self.clone(), indices.to_vec()),
            self.requires_grad(),
        )
    }

    /// Columns `start..start+len` of a matrix.
    pub fn narrow_cols(&self, start: usize, len: usize) -> Var {
        let a = self.value();
        assert_eq!(a.shape.len(), 2);
        let (m, n) = (a.shape[0], a.shape[1]);
        assert!(start + len <= n, "narrow_cols out of range");
        let mut out = Vec::with_capacity(m * len);
        for r in 0..m {
            out.extend_from_slice(&a.data[r * n + start..r * n + start + len]);
        }
        Var::from_op(
            Tensor::new(vec![m, len], out),
            Op::NarrowCols(self.clone(), start),
            self.requires_grad(),
        )
    }

    /// Concatenates matrices along axis 0 (rows) or 1 (columns).
    pub fn concat(parts: &[Var], axis: usize) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        assert!(axis < 2, "concat supports matrices only");
        for p in parts {
            assert_eq!(p.shape().len(), 2, "concat expects matrices");
            assert_eq!(p.shape()[1 - axis], parts[0].shape()[1 - axis]);
        }
        let value = if axis == 0 {
            let cols = parts[0].shape()[1];
            let rows = parts.iter().map(|p| p.shape()[0]).sum();
            let mut data = Vec::with_capacity(rows * cols);
            for p in parts {
                data.extend_from_slice(&p.value().data);
            }
            Tensor::new(vec![rows, cols], data)
        } else {
            let rows = parts[0].shape()[0];
            let cols: usize = parts.iter().map(|p| p.shape()[1]).sum();
            let mut data = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                for p in parts {
                    let c = p.shape()[1];
                    data.extend_from_slice(&p.value().data[r * c..(r + 1) * c]);
                }
            }
            Tensor::new(vec![rows, cols], data)
        };
        let rg = parts.iter().any(|p| p.requires_grad());
        Var::from_op(value, Op::Concat(parts.to_vec(), axis), rg)
    }

    /// `Σ_r weights[r] · (−log softmax(self[r])[targets[r]])` over rows of a
    /// logit matrix. Returns a scalar.
    pub fn cross_entropy(&self, targets: &[usize], weights: &[f64]) -> Var {
        let a = self.value();
        assert_eq!(a.shape.len(), 2);
        let (rows, classes) = (a.shape[0], a.shape[1]);
        assert_eq!(targets.len(), rows);
        assert_eq!(weights.len(), rows);
        let mut probs = a.data.clone();
        let mut total = 0.0;
        for (r, row) in probs.chunks_mut(classes).enumerate() {
            let t = targets[r];
            assert!(t < classes, "target class {t} out of range {classes}");
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            if weights[r] != 0.0 {
                total += weights[r] * (lse - row[t]);
            }
            for v in row.iter_mut() {
                *v = (*v - lse).exp();
            }
        }
        Var::from_op(
            Tensor::scalar(total),
            Op::CrossEntropy {
                logits: self.clone(),
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
            self.requires_grad(),
        )
    }

    fn parents(&self) -> Vec<&Var> {
        match &self.0.op {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::MatMul(a, b) => {
                vec![a, b]
            }
            Op::Transpose(a)
            | Op::Reshape(a)
            | Op::SumAxis(a, _)
            | Op::SumAll(a)
            | Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Sqrt(a)
            | Op::Gelu(a)
            | Op::Softplus(a)
            | Op::HuberSq(a, _)
            | Op::Softmax(a)
            | Op::IndexRows(a, _)
            | Op::NarrowCols(a, _) => vec![a],
            Op::LayerNorm { x, gamma, beta, .. } => vec![x, gamma, beta],
            Op::Concat(parts, _) => parts.iter().collect(),
            Op::CrossEntropy { logits, .. } => vec![logits],
        }
    }

    /// Gradients for each parent given the gradient of this node's output.
    fn backprop(&self, g: &Tensor) -> Vec<(Var, Tensor)> {
        let out = &self.0.value;
        match &self.0.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![
                (a.clone(), reduce_to(g, a.shape())),
                (b.clone(), reduce_to(g, b.shape())),
            ],
            Op::Sub(a, b) => vec![
                (a.clone(), reduce_to(g, a.shape())),
                (b.clone(), reduce_to(&map(g, |v| -v), b.shape())),
            ],
            Op::Mul(a, b) => {
                let ga = broadcast_map(g, b.value(), |gv, bv| gv * bv);
                let gb = broadcast_map(g, a.value(), |gv, av| gv * av);
                vec![
                    (a.clone(), reduce_to(&ga, a.shape())),
                    (b.clone(), reduce_to(&gb, b.shape())),
                ]
            }
            Op::Div(a, b) => {
                let ga = broadcast_map(g, b.value(), |gv, bv| gv / bv);
                // d(a/b)/db = -out/b
                let q = broadcast_map(out, b.value(), |o, bv| -o / bv);
                let gb = broadcast_map(g, &q, |gv, qv| gv * qv);
                vec![
                    (a.clone(), reduce_to(&ga, a.shape())),
                    (b.clone(), reduce_to(&gb, b.shape())),
                ]
            }
            Op::MatMul(a, b) => {
                let (m, k) = (a.shape()[0], a.shape()[1]);
                let n = b.shape()[1];
                let mut result = Vec::new();
                if a.requires_grad() {
                    // g (m×n) · bᵀ (n×k)
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, &g.data, (n, 1), &b.value().data, (1, n), &mut ga, 0.0);
                    result.push((a.clone(), Tensor::new(vec![m, k], ga)));
                }
                if b.requires_grad() {
                    // aᵀ (k×m) · g (m×n)
                    let mut gb = vec![0.0; k * n];
                    gemm(k, m, n, &a.value().data, (1, k), &g.data, (n, 1), &mut gb, 0.0);
                    result.push((b.clone(), Tensor::new(vec![k, n], gb)));
                }
                result
            }
            Op::Transpose(a) => {
                let (m, n) = (a.shape()[0], a.shape()[1]);
                vec![(
                    a.clone(),
                    Tensor::new(vec![m, n], transpose_data(&g.data, n, m)),
                )]
            }
            Op::Reshape(a) => vec![(a.clone(), Tensor::new(a.shape().to_vec(), g.data.clone()))],
            Op::SumAxis(a, axis) => {
                let (outer, len, inner) = axis_split(a.shape(), *axis);
                let mut ga = vec![0.0; a.value().len()];
                for o in 0..outer {
                    let src = &g.data[o * inner..(o + 1) * inner];
                    for l in 0..len {
                        ga[(o * len + l) * inner..(o * len + l + 1) * inner].copy_from_slice(src);
                    }
                }
                vec![(a.clone(), Tensor::new(a.shape().to_vec(), ga))]
            }
            Op::SumAll(a) => vec![(a.clone(), Tensor::full(a.shape(), g.item()))],
            Op::Scale(a, c) => vec![(a.clone(), map(g, |v| v * c))],
            Op::AddScalar(a) => vec![(a.clone(), g.clone())],
            Op::Exp(a) => vec![(a.clone(), zip_map(g, out, |gv, o| gv * o))],
            Op::Log(a) => vec![(a.clone(), zip_map(g, a.value(), |gv, x| gv / x))],
            Op::Sqrt(a) => vec![(a.clone(), zip_map(g, out, |gv, o| gv * 0.5 / o))],
            Op::Gelu(a) => vec![(a.clone(), zip_map(g, a.value(), |gv, x| gv * gelu_grad(x)))],
            Op::Softplus(a) => vec![(a.clone(), zip_map(g, a.value(), |gv, x| gv * sigmoid(x)))],
            Op::HuberSq(a, delta) => {
                let d = *delta;
                vec![(
                    a.clone(),
                    zip_map(g, a.value(), |gv, s| {
                        if s < d * d {
                            0.5 * gv
                        } else {
                            gv * d / (2.0 * s.sqrt())
                        }
                    }),
                )]
            }
            Op::Softmax(a) => {
                let width = *out.shape.last().unwrap();
                let mut ga = vec![0.0; out.len()];
                for ((gr, yr), dst) in g
                    .data
                    .chunks(width)
                    .zip(out.data.chunks(width))
                    .zip(ga.chunks_mut(width))
                {
                    let dot: f64 = gr.iter().zip(yr).map(|(x, y)| x * y).sum();
                    for c in 0..width {
                        dst[c] = yr[c] * (gr[c] - dot);
                    }
                }
                vec![(a.clone(), Tensor::new(out.shape.clone(), ga))]
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let width = *out.shape.last().unwrap();
                let gm = &gamma.value().data;
                let mut gx = vec![0.0; out.len()];
                let mut gg = vec![0.0; width];
                let mut gb = vec![0.0; width];
                for (r, is) in inv_std.iter().enumerate() {
                    let gr = &g.data[r * width..(r + 1) * width];
                    let hr = &xhat[r * width..(r + 1) * width];
                    let mut sum_d = 0.0;
                    let mut sum_dh = 0.0;
                    for c in 0..width {
                        gg[c] += gr[c] * hr[c];
                        gb[c] += gr[c];
                        let dh = gr[c] * gm[c];
                        sum_d += dh;
                        sum_dh += dh * hr[c];
                    }
                    let w = width as f64;
                    for c in 0..width {
                        let dh = gr[c] * gm[c];
                        gx[r * width + c] = is * (dh - sum_d / w - hr[c] * sum_dh / w);
                    }
                }
                vec![
                    (x.clone(), Tensor::new(out.shape.clone(), gx)),
                    (gamma.clone(), Tensor::new(gamma.shape().to_vec(), gg)),
                    (beta.clone(), Tensor::new(beta.shape().to_vec(), gb)),
                ]
            }
            Op::IndexRows(a, indices) => {
                let cols = a.shape()[1];
                let mut ga = vec![0.0; a.value().len()];
                for (r, &i) in indices.iter().enumerate() {
                    for c in 0..cols {
                        ga[i * cols + c] += g.data[r * cols + c];
                    }
                }
                vec![(a.clone(), Tensor::new(a.shape().to_vec(), ga))]
            }
            Op::NarrowCols(a, start) => {
                let (m, n) = (a.shape()[0], a.shape()[1]);
                let len = out.shape[1];
                let mut ga = vec![0.0; m * n];
                for r in 0..m {
                    ga[r * n + start..r * n + start + len]
                        .copy_from_slice(&g.data[r * len..(r + 1) * len]);
                }
                vec![(a.clone(), Tensor::new(vec![m, n], ga))]
            }
            Op::Concat(parts, axis) => {
                let mut result = Vec::with_capacity(parts.len());
                if *axis == 0 {
                    let mut offset = 0;
                    for p in parts {
                        let len = p.value().len();
                        result.push((
                            p.clone(),
                            Tensor::new(p.shape().to_vec(), g.data[offset..offset + len].to_vec()),
                        ));
                        offset += len;
                    }
                } else {
                    let rows = out.shape[0];
                    let total = out.shape[1];
                    let mut start = 0;
                    for p in parts {
                        let c = p.shape()[1];
                        let mut gp = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            gp.extend_from_slice(&g.data[r * total + start..r * total + start + c]);
                        }
                        result.push((p.clone(), Tensor::new(vec![rows, c], gp)));
                        start += c;
                    }
                }
                result
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
            } => {
                let classes = logits.shape()[1];
                let scale = g.item();
                let mut gl = vec![0.0; probs.len()];
                for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                    if w == 0.0 {
                        continue;
                    }
                    for c in 0..classes {
                        let onehot = if c == t { 1.0 } else { 0.0 };
                        gl[r * classes + c] = scale * w * (probs[r * classes + c] - onehot);
                    }
                }
                vec![(logits.clone(), Tensor::new(logits.shape().to_vec(), gl))]
            }
        }
    }
}

/// Gradients of a scalar with respect to every reachable leaf created with
/// [`Var::param`].
#[derive(Debug, Default)]
pub struct Gradients {
    grads: HashMap<u64, Tensor>,
}

impl Gradients {
    pub fn get(&self, var: &Var) -> Option<&Tensor> {
        self.grads.get(&var.id())
    }

    /// Gradient of `var`, or zeros when the scalar does not depend on it.
    pub fn get_or_zeros(&self, var: &Var) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.shape()))
    }
}

pub fn backward(loss: &Var) -> Gradients {
    assert_eq!(loss.value().len(), 1, "backward() needs a scalar output");
    let mut result = Gradients::default();
    if !loss.requires_grad() {
        return result;
    }
    let mut nodes = Vec::new();
    let mut seen = HashSet::new();
    let mut stack = vec![loss.clone()];
    while let Some(v) = stack.pop() {
        if !v.requires_grad() || !seen.insert(v.id()) {
            continue;
        }
        for p in v.parents() {
            if p.requires_grad() && !seen.contains(&p.id()) {
                stack.push(p.clone());
            }
        }
        nodes.push(v);
    }
    nodes.sort_by_key(|v| std::cmp::Reverse(v.id()));

    let mut pending: HashMap<u64, Tensor> = HashMap::new();
    pending.insert(loss.id(), Tensor::full(loss.shape(), 1.0));
    for v in nodes {
        let Some(g) = pending.remove(&v.id()) else {
            continue;
        };
        if matches!(v.0.op, Op::Leaf) {
            result.grads.insert(v.id(), g);
            continue;
        }
        if let Op::MatMul(a, b) = &v.0.op {
            matmul_backward_into(a, b, &g, &mut pending);
            continue;
        }
        if let Op::IndexRows(a, indices) = &v.0.op {
            if a.requires_grad() {
                let cols = a.shape()[1];
                let acc = pending
                    .entry(a.id())
                    .or_insert_with(|| Tensor::zeros(a.shape()));
                for (r, &i) in indices.iter().enumerate() {
                    for (dst, src) in acc.data[i * cols..(i + 1) * cols]
                        .iter_mut()
                        .zip(&g.data[r * cols..(r + 1) * cols])
                    {
                        *dst += src;
                    }
                }
            }
            continue;
        }
        for (parent, gp) in v.backprop(&g) {
            if !parent.requires_grad() {
                continue;
            }
            match pending.get_mut(&parent.id()) {
                Some(acc) => acc.add_assign(&gp),
                None => {
                    pending.insert(parent.id(), gp);
                }
            }
        }
    }
    result
}

/// Matrix-product backward that accumulates straight into pending buffers.
fn matmul_backward_into(a: &Var, b: &Var, g: &Tensor, pending: &mut HashMap<u64, Tensor>) {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    if a.requires_grad() {
        let acc = pending
            .entry(a.id())
            .or_insert_with(|| Tensor::zeros(a.shape()));
        // g (m×n) · bᵀ (n×k)
        gemm(m, n, k, &g.data, (n, 1), &b.value().data, (1, n), &mut acc.data, 1.0);
    }
    if b.requires_grad() {
        let acc = pending
            .entry(b.id())
            .or_insert_with(|| Tensor::zeros(b.shape()));
        // aᵀ (k×m) · g (m×n)
        gemm(k, m, n, &a.value().data, (1, k), &g.data, (n, 1), &mut acc.data, 1.0);
    }
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`].
pub fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn huber_sq(s: f64, delta: f64) -> f64 {
    if s < delta * delta {
        0.5 * s
    } else {
        delta * (s.sqrt() - 0.5 * delta)
    }
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn map(a: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(a.shape.clone(), a.data.iter().map(|&v| f(v)).collect())
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    debug_assert_eq!(a.shape, b.shape);
    Tensor::new(
        a.shape.clone(),
        a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
    )
}

fn transpose_data(data: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = data[i * n + j];
        }
    }
    out
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    assert!(axis < shape.len(), "axis {axis} out of range for {shape:?}");
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// `c = a·b + beta·c` with explicit (row, col) strides for `a` and `b`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: slice lengths cover the strided extents asserted below.
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => panic!("shapes {a:?} and {b:?} do not broadcast"),
        };
    }
    out
}

/// Strides of `shape` laid against the broadcast `out` shape (0 on
/// broadcast axes).
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let mut strides = vec![0; rank];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        let oi = i + rank - shape.len();
        strides[oi] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

fn for_each_broadcast(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let total: usize = out.iter().product();
    let rank = out.len();
    let mut idx = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    for o in 0..total {
        f(o, ia, ib);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            ia += sa[ax];
            ib += sb[ax];
            if idx[ax] < out[ax] {
                break;
            }
            ia -= sa[ax] * out[ax];
            ib -= sb[ax] * out[ax];
            idx[ax] = 0;
        }
    }
}

fn broadcast_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    if a.shape == b.shape {
        return zip_map(a, b, f);
    }
    let out_shape = broadcast_shape(&a.shape, &b.shape);
    let sa = broadcast_strides(&a.shape, &out_shape);
    let sb = broadcast_strides(&b.shape, &out_shape);
    let mut out = vec![0.0; out_shape.iter().product()];
    for_each_broadcast(&out_shape, &sa, &sb, |o, ia, ib| {
        out[o] = f(a.data[ia], b.data[ib]);
    });
    Tensor::new(out_shape, out)
}

/// Sums a broadcast gradient back down to `shape`.
fn reduce_to(g: &Tensor, shape: &[usize]) -> Tensor {
    if g.shape == shape {
        return g.clone();
    }
    let sa = broadcast_strides(shape, &g.shape);
    let mut out = vec![0.0; shape.iter().product()];
    let zeros = vec![0; g.shape.len()];
    for_each_broadcast(&g.shape, &sa, &zeros, |o, ia, _| {
        out[ia] += g.data[o];
    });
    Tensor::new(shape.to_vec(), out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec())
    }

    /// Central finite differences of `f` at `x`.
    fn numeric_grad(x: &Tensor, f: impl Fn(&Tensor) -> f64) -> Tensor {
        let h = 1e-6;
        let mut g = Tensor::zeros(x.shape());
        for i in 0..x.len() {
            let mut p = x.clone();
            p.data_mut()[i] += h;
            let mut m = x.clone();
            m.data_mut()[i] -= h;
            g.data_mut()[i] = (f(&p) - f(&m)) / (2.0 * h);
        }
        g
    }

    fn check(x: Tensor, build: impl Fn(&Var) -> Var) {
        let v = Var::param(x.clone());
        let out = build(&v);
        let grads = backward(&out);
        let analytic = grads.get_or_zeros(&v);
        let numeric = numeric_grad(&x, |p| build(&Var::constant(p.clone())).value().item());
        let err = analytic.max_abs_diff(&numeric);
        assert!(err < 1e-6, "gradient mismatch {err}: {analytic:?} vs {numeric:?}");
    }

    #[test]
    fn broadcast_add_shapes() {
        let a = Var::constant(t(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
        let b = Var::constant(t(&[1, 3], &[10., 20., 30.]));
        let c = a.add(&b);
        assert_eq!(c.value().data(), &[11., 22., 33., 14., 25., 36.]);
        let col = Var::constant(t(&[2, 1], &[1., 2.]));
        let d = col.sub(&b);
        assert_eq!(d.shape(), &[2, 3]);
        assert_eq!(d.value().data(), &[-9., -19., -29., -8., -18., -28.]);
    }

    #[test]
    fn gradients_of_elementwise_ops() {
        let x = t(&[2, 3], &[0.3, -1.2, 0.7, 1.5, -0.4, 0.9]);
        let w = Var::constant(t(&[1, 3], &[0.5, -2.0, 1.5]));
        check(x.clone(), |v| v.mul(&w).gelu().sum());
        check(x.clone(), |v| v.softplus().div(&w).sum());
        check(x.clone(), |v| v.exp().add_scalar(1.0).ln().scale(0.7).sum());
        check(x.clone(), |v| v.square().add_scalar(0.1).sqrt().sum());
        check(x.clone(), |v| v.square().huber_from_squared(1.0).sum());
        check(x, |v| w.div(&v.square().add_scalar(1.0)).sum());
    }

    #[test]
    fn gradients_of_structural_ops() {
        let x = t(&[2, 3], &[0.3, -1.2, 0.7, 1.5, -0.4, 0.9]);
        let m = Var::constant(t(&[3, 2], &[1.0, 0.5, -0.3, 2.0, 0.1, -1.0]));
        check(x.clone(), |v| v.matmul(&m).square().sum());
        check(x.clone(), |v| m.matmul(v).gelu().sum());
        check(x.clone(), |v| v.transpose().matmul(&v.scale(0.5)).sum());
        check(x.clone(), |v| v.sum_axis(0).square().sum());
        check(x.clone(), |v| v.sum_axis(1).exp().sum());
        check(x.clone(), |v| v.reshape(&[3, 2]).matmul(&m.transpose()).square().sum());
        check(x.clone(), |v| {
            Var::concat(&[v.narrow_cols(1, 2), v.narrow_cols(0, 1)], 1)
                .mul(&Var::constant(t(&[1, 3], &[1.0, 2.0, 3.0])))
                .square()
                .sum()
        });
        check(x.clone(), |v| Var::concat(&[v.clone(), v.square()], 0).exp().sum());
        check(x, |v| v.index_rows(&[1, 0, 1]).square().sum());
    }

    #[test]
    fn gradients_of_fused_ops() {
        let x = t(&[2, 4], &[0.3, -1.2, 0.7, 0.2, 1.5, -0.4, 0.9, -0.8]);
        let probe = Var::constant(t(&[2, 4], &[1.0, -0.5, 0.3, 2.0, 0.7, 0.1, -1.5, 0.4]));
        check(x.clone(), |v| v.softmax().mul(&probe).sum());
        let gamma = Var::constant(t(&[4], &[1.0, 0.5, -0.7, 2.0]));
        let beta = Var::constant(t(&[4], &[0.1, 0.0, 0.3, -0.2]));
        check(x.clone(), |v| v.layer_norm(&gamma, &beta, 1e-5).mul(&probe).sum());
        check(t(&[4], &[1.0, 0.5, -0.7, 2.0]), |g| {
            Var::constant(x.clone())
                .layer_norm(g, &beta, 1e-5)
                .mul(&probe)
                .sum()
        });
        check(x, |v| v.cross_entropy(&[2, 0], &[0.5, 0.25]));
    }

    #[test]
    fn shared_leaf_accumulates() {
        let v = Var::param(Tensor::scalar(3.0));
        let out = v.mul(&v).add(&v);
        let g = backward(&out);
        assert_eq!(g.get(&v).unwrap().item(), 7.0);
    }

    #[test]
    fn detached_values_receive_no_gradient() {
        let v = Var::param(t(&[2], &[1.0, 2.0]));
        let out = v.detach().mul(&v).sum();
        let g = backward(&out);
        assert_eq!(g.get(&v).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn cross_entropy_value() {
        let logits = Var::constant(t(&[1, 3], &[0.0, 0.0, 0.0]));
        let ce = logits.cross_entropy(&[1], &[1.0]);
        assert!((ce.value().item() - 3f64.ln()).abs() < 1e-15);
    }
}
