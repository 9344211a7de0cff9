//! Dense tensors with reverse-mode automatic differentiation.
//!
//! The tape is rebuilt per forward pass (define-by-run): model code leases
//! parameters from a [`ParamStore`] onto a fresh [`Tape`], composes ops, and
//! calls [`Tensor::backward_into`] on the scalar loss to accumulate leaf
//! gradients back into the store. Node ids grow monotonically, so a single
//! reverse sweep over the arena is a valid topological order and gradients
//! are bitwise deterministic.
//!
//! Element type is generic over [`Real`]: tests and gradient checks run at
//! f64, training defaults to f32.

mod gradcheck;
mod params;

pub use gradcheck::{grad_check, GradCheckEntry, GradCheckReport};
pub use params::{init, Param, ParamId, ParamStore};

use std::cell::RefCell;
use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::rc::Rc;

use num_traits::Float;

/// Floating-point element type for tensors. Implemented for f32 and f64.
pub trait Real:
    Float + Sum + Debug + Display + Default + Send + Sync + 'static
{
    const NAME: &'static str;

    fn from_f64(v: f64) -> Self;
    fn into_f64(self) -> f64;
}

impl Real for f32 {
    const NAME: &'static str = "f32";

    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn into_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    const NAME: &'static str = "f64";

    fn from_f64(v: f64) -> Self {
        v
    }

    fn into_f64(self) -> f64 {
        self
    }
}

// ── Graph nodes ──────────────────────────────────────────────────────

type NodeId = usize;

enum Op<T> {
    Leaf { param: Option<ParamId> },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Neg(NodeId),
    AddScalar(NodeId),
    MulScalar(NodeId, T),
    Exp(NodeId),
    Relu(NodeId),
    Clamp { input: NodeId, lo: T, hi: T },
    Matmul { a: NodeId, b: NodeId, m: usize, k: usize, n: usize },
    Transpose { input: NodeId, rows: usize, cols: usize },
    Embedding { table: NodeId, ids: Vec<usize> },
    ConcatRows { inputs: Vec<NodeId> },
    ConcatCols { inputs: Vec<NodeId> },
    SliceRows { input: NodeId, start: usize },
    SliceCols { input: NodeId, start: usize },
    AddRow { x: NodeId, row: NodeId },
    SumAll(NodeId),
    MeanAll(NodeId),
    Softmax { input: NodeId, axis: usize },
    MaskedRowSoftmax { input: NodeId, mask: Rc<Vec<bool>> },
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId, means: Vec<T>, inv_stds: Vec<T> },
    CrossEntropy { logits: NodeId, targets: Vec<usize>, weights: Vec<T>, probs: Vec<T> },
}

struct Node<T> {
    op: Op<T>,
    shape: Vec<usize>,
    values: Vec<T>,
    grad: Vec<T>,
    needs_grad: bool,
}

struct TapeInner<T> {
    nodes: Vec<Node<T>>,
}

/// Recording tape for one forward pass.
pub struct Tape<T: Real> {
    inner: Rc<RefCell<TapeInner<T>>>,
}

impl<T: Real> Clone for Tape<T> {
    fn clone(&self) -> Self {
        Tape { inner: Rc::clone(&self.inner) }
    }
}

/// Handle to a node on a [`Tape`]. Cheap to clone.
pub struct Tensor<T: Real> {
    tape: Tape<T>,
    node: NodeId,
}

impl<T: Real> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor { tape: self.tape.clone(), node: self.node }
    }
}

fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Interprets a shape as [rows, cols]; rank-1 is one row, scalar is 1x1.
fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        0 => (1, 1),
        1 => (1, shape[0]),
        2 => (shape[0], shape[1]),
        _ => panic!("tensor: rank {} unsupported here", shape.len()),
    }
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { inner: Rc::new(RefCell::new(TapeInner { nodes: Vec::new() })) }
    }

    pub fn node_count(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    fn push(&self, op: Op<T>, shape: Vec<usize>, values: Vec<T>, needs_grad: bool) -> Tensor<T> {
        debug_assert_eq!(values.len(), numel_of(&shape));
        let grad = vec![T::zero(); values.len()];
        let mut inner = self.inner.borrow_mut();
        let node = inner.nodes.len();
        inner.nodes.push(Node { op, shape, values, grad, needs_grad });
        Tensor { tape: self.clone(), node }
    }

    fn needs(&self, id: NodeId) -> bool {
        self.inner.borrow().nodes[id].needs_grad
    }

    /// Constant leaf: gradients never flow into it.
    pub fn constant(&self, values: Vec<T>, shape: Vec<usize>) -> Tensor<T> {
        self.push(Op::Leaf { param: None }, shape, values, false)
    }

    pub fn constant_f64(&self, values: Vec<f64>, shape: Vec<usize>) -> Tensor<T> {
        self.constant(values.into_iter().map(T::from_f64).collect(), shape)
    }

    pub fn scalar(&self, v: T) -> Tensor<T> {
        self.constant(vec![v], vec![1])
    }

    pub fn zeros(&self, shape: Vec<usize>) -> Tensor<T> {
        let n = numel_of(&shape);
        self.constant(vec![T::zero(); n], shape)
    }

    /// Leases a parameter onto the tape as a differentiable leaf.
    pub fn param(&self, store: &ParamStore<T>, id: ParamId) -> Tensor<T> {
        store.note_access(id);
        let p = store.get(id);
        self.push(Op::Leaf { param: Some(id) }, p.shape.clone(), p.data.clone(), true)
    }

    /// Differentiable row gather: `table[ids[r], :]` for each r.
    pub fn embedding(&self, table: &Tensor<T>, ids: &[usize]) -> Tensor<T> {
        self.check_same_tape(table);
        let (vocab, dim) = {
            let inner = self.inner.borrow();
            let shape = &inner.nodes[table.node].shape;
            assert_eq!(shape.len(), 2, "embedding: table must be rank-2, got {shape:?}");
            (shape[0], shape[1])
        };
        let mut values = Vec::with_capacity(ids.len() * dim);
        {
            let inner = self.inner.borrow();
            let tv = &inner.nodes[table.node].values;
            for &id in ids {
                assert!(id < vocab, "embedding: id {id} out of range for vocab {vocab}");
                values.extend_from_slice(&tv[id * dim..(id + 1) * dim]);
            }
        }
        let needs = self.needs(table.node);
        self.push(
            Op::Embedding { table: table.node, ids: ids.to_vec() },
            vec![ids.len(), dim],
            values,
            needs,
        )
    }

    /// Concatenates rank-2 tensors along rows (axis 0).
    pub fn concat_rows(&self, parts: &[Tensor<T>]) -> Tensor<T> {
        assert!(!parts.is_empty(), "concat_rows: empty input");
        let mut rows = 0;
        let mut cols = None;
        for p in parts {
            self.check_same_tape(p);
            let (r, c) = rows_cols(&p.shape());
            rows += r;
            match cols {
                None => cols = Some(c),
                Some(c0) => assert_eq!(c, c0, "concat_rows: column mismatch"),
            }
        }
        let cols = cols.unwrap();
        let mut values = Vec::with_capacity(rows * cols);
        let mut needs = false;
        {
            let inner = self.inner.borrow();
            for p in parts {
                values.extend_from_slice(&inner.nodes[p.node].values);
                needs |= inner.nodes[p.node].needs_grad;
            }
        }
        self.push(
            Op::ConcatRows { inputs: parts.iter().map(|p| p.node).collect() },
            vec![rows, cols],
            values,
            needs,
        )
    }

    /// Concatenates rank-2 tensors along the last axis (columns).
    pub fn concat_cols(&self, parts: &[Tensor<T>]) -> Tensor<T> {
        assert!(!parts.is_empty(), "concat_cols: empty input");
        let mut rows = None;
        let mut cols = 0;
        for p in parts {
            self.check_same_tape(p);
            let (r, c) = rows_cols(&p.shape());
            cols += c;
            match rows {
                None => rows = Some(r),
                Some(r0) => assert_eq!(r, r0, "concat_cols: row mismatch"),
            }
        }
        let rows = rows.unwrap();
        let mut values = vec![T::zero(); rows * cols];
        let mut needs = false;
        {
            let inner = self.inner.borrow();
            let mut offset = 0;
            for p in parts {
                let node = &inner.nodes[p.node];
                let (_, c) = rows_cols(&node.shape);
                for r in 0..rows {
                    values[r * cols + offset..r * cols + offset + c]
                        .copy_from_slice(&node.values[r * c..(r + 1) * c]);
                }
                offset += c;
                needs |= node.needs_grad;
            }
        }
        self.push(
            Op::ConcatCols { inputs: parts.iter().map(|p| p.node).collect() },
            vec![rows, cols],
            values,
            needs,
        )
    }

    /// Masked sum of per-position negative log-likelihoods.
    ///
    /// `logits` is [positions x vocab]; positions with weight 0 contribute
    /// exactly 0. Returns a scalar.
    pub fn cross_entropy(&self, logits: &Tensor<T>, targets: &[usize], weights: &[f64]) -> Tensor<T> {
        self.check_same_tape(logits);
        let shape = logits.shape();
        let (rows, vocab) = rows_cols(&shape);
        assert_eq!(targets.len(), rows, "cross_entropy: {} targets for {rows} positions", targets.len());
        assert_eq!(weights.len(), rows, "cross_entropy: {} weights for {rows} positions", weights.len());
        let w: Vec<T> = weights.iter().map(|&v| T::from_f64(v)).collect();

        let mut probs = vec![T::zero(); rows * vocab];
        let mut total = T::zero();
        {
            let inner = self.inner.borrow();
            let xs = &inner.nodes[logits.node].values;
            for r in 0..rows {
                let t = targets[r];
                assert!(t < vocab, "cross_entropy: target id {t} out of range for vocab {vocab}");
                let row = &xs[r * vocab..(r + 1) * vocab];
                let mut max = row[0];
                for &v in row {
                    assert!(v.is_finite(), "cross_entropy: non-finite logit at row {r}");
                    if v > max {
                        max = v;
                    }
                }
                let mut z = T::zero();
                for (j, &v) in row.iter().enumerate() {
                    let e = (v - max).exp();
                    probs[r * vocab + j] = e;
                    z = z + e;
                }
                for j in 0..vocab {
                    probs[r * vocab + j] = probs[r * vocab + j] / z;
                }
                let lse = max + z.ln();
                total = total + w[r] * (lse - row[t]);
            }
        }
        let needs = self.needs(logits.node);
        self.push(
            Op::CrossEntropy { logits: logits.node, targets: targets.to_vec(), weights: w, probs },
            vec![1],
            vec![total],
            needs,
        )
    }

    fn check_same_tape(&self, t: &Tensor<T>) {
        assert!(Rc::ptr_eq(&self.inner, &t.tape.inner), "tensor: mixed tapes");
    }

    // ── Backward ─────────────────────────────────────────────────────

    fn backward_from(&self, out: NodeId) {
        let mut inner = self.inner.borrow_mut();
        let nodes = &mut inner.nodes;
        assert_eq!(
            numel_of(&nodes[out].shape),
            1,
            "backward: loss must be scalar, got shape {:?}",
            nodes[out].shape
        );
        for node in nodes.iter_mut() {
            node.grad.iter_mut().for_each(|g| *g = T::zero());
        }
        nodes[out].grad[0] = T::one();

        for id in (0..=out).rev() {
            if !nodes[id].needs_grad {
                continue;
            }
            // Split borrows: take the output grad first.
            let go = std::mem::take(&mut nodes[id].grad);
            match &nodes[id].op {
                Op::Leaf { .. } => {}
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    accumulate(nodes, a, |i| go[i]);
                    accumulate(nodes, b, |i| go[i]);
                }
                Op::Sub(a, b) => {
                    let (a, b) = (*a, *b);
                    accumulate(nodes, a, |i| go[i]);
                    accumulate(nodes, b, |i| -go[i]);
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    let bv = nodes[b].values.clone();
                    let av = nodes[a].values.clone();
                    accumulate(nodes, a, |i| go[i] * bv[i]);
                    accumulate(nodes, b, |i| go[i] * av[i]);
                }
                Op::Neg(a) => {
                    let a = *a;
                    accumulate(nodes, a, |i| -go[i]);
                }
                Op::AddScalar(a) => {
                    let a = *a;
                    accumulate(nodes, a, |i| go[i]);
                }
                Op::MulScalar(a, c) => {
                    let (a, c) = (*a, *c);
                    accumulate(nodes, a, |i| go[i] * c);
                }
                Op::Exp(a) => {
                    let a = *a;
                    let out_vals = nodes[id].values.clone();
                    accumulate(nodes, a, |i| go[i] * out_vals[i]);
                }
                Op::Relu(a) => {
                    let a = *a;
                    let av = nodes[a].values.clone();
                    accumulate(nodes, a, |i| if av[i] > T::zero() { go[i] } else { T::zero() });
                }
                Op::Clamp { input, lo, hi } => {
                    let (a, lo, hi) = (*input, *lo, *hi);
                    let av = nodes[a].values.clone();
                    accumulate(nodes, a, |i| {
                        if av[i] > lo && av[i] < hi { go[i] } else { T::zero() }
                    });
                }
                Op::Matmul { a, b, m, k, n } => {
                    let (a, b, m, k, n) = (*a, *b, *m, *k, *n);
                    let av = nodes[a].values.clone();
                    let bv = nodes[b].values.clone();
                    if nodes[a].needs_grad {
                        let da = &mut nodes[a].grad;
                        for i in 0..m {
                            for j in 0..n {
                                let g = go[i * n + j];
                                if g != T::zero() {
                                    for p in 0..k {
                                        da[i * k + p] = da[i * k + p] + g * bv[p * n + j];
                                    }
                                }
                            }
                        }
                    }
                    if nodes[b].needs_grad {
                        let db = &mut nodes[b].grad;
                        for i in 0..m {
                            for p in 0..k {
                                let av_ip = av[i * k + p];
                                if av_ip != T::zero() {
                                    for j in 0..n {
                                        db[p * n + j] = db[p * n + j] + av_ip * go[i * n + j];
                                    }
                                }
                            }
                        }
                    }
                }
                Op::Transpose { input, rows, cols } => {
                    let (a, rows, cols) = (*input, *rows, *cols);
                    // out is [cols x rows]; go[j * rows + i] feeds a[i * cols + j].
                    accumulate_indexed(nodes, a, |i| {
                        let r = i / cols;
                        let c = i % cols;
                        go[c * rows + r]
                    });
                }
                Op::Embedding { table, ids } => {
                    let table = *table;
                    let ids = ids.clone();
                    let dim = nodes[id].shape[1];
                    if nodes[table].needs_grad {
                        let dt = &mut nodes[table].grad;
                        for (r, &tok) in ids.iter().enumerate() {
                            for c in 0..dim {
                                dt[tok * dim + c] = dt[tok * dim + c] + go[r * dim + c];
                            }
                        }
                    }
                }
                Op::ConcatRows { inputs } => {
                    let inputs = inputs.clone();
                    let mut offset = 0;
                    for inp in inputs {
                        let n = nodes[inp].values.len();
                        let base = offset;
                        accumulate(nodes, inp, |i| go[base + i]);
                        offset += n;
                    }
                }
                Op::ConcatCols { inputs } => {
                    let inputs = inputs.clone();
                    let cols = nodes[id].shape[1];
                    let mut offset = 0;
                    for inp in inputs {
                        let (r_i, c_i) = rows_cols(&nodes[inp].shape);
                        let _ = r_i;
                        let base = offset;
                        accumulate_indexed(nodes, inp, |i| {
                            let r = i / c_i;
                            let c = i % c_i;
                            go[r * cols + base + c]
                        });
                        offset += c_i;
                    }
                }
                Op::SliceRows { input, start } => {
                    let (a, start) = (*input, *start);
                    let cols = nodes[id].shape[1];
                    let n = nodes[id].values.len();
                    if nodes[a].needs_grad {
                        let da = &mut nodes[a].grad;
                        for i in 0..n {
                            da[start * cols + i] = da[start * cols + i] + go[i];
                        }
                    }
                }
                Op::SliceCols { input, start } => {
                    let (a, start) = (*input, *start);
                    let out_cols = nodes[id].shape[1];
                    let in_cols = nodes[a].shape[1];
                    let rows = nodes[id].shape[0];
                    if nodes[a].needs_grad {
                        let da = &mut nodes[a].grad;
                        for r in 0..rows {
                            for c in 0..out_cols {
                                let idx = r * in_cols + start + c;
                                da[idx] = da[idx] + go[r * out_cols + c];
                            }
                        }
                    }
                }
                Op::AddRow { x, row } => {
                    let (x, row) = (*x, *row);
                    let cols = nodes[id].shape[1];
                    accumulate(nodes, x, |i| go[i]);
                    if nodes[row].needs_grad {
                        let rows = nodes[id].shape[0];
                        let dr = &mut nodes[row].grad;
                        for r in 0..rows {
                            for c in 0..cols {
                                dr[c] = dr[c] + go[r * cols + c];
                            }
                        }
                    }
                }
                Op::SumAll(a) => {
                    let a = *a;
                    accumulate(nodes, a, |_| go[0]);
                }
                Op::MeanAll(a) => {
                    let a = *a;
                    let n = T::from_f64(nodes[a].values.len() as f64);
                    accumulate(nodes, a, |_| go[0] / n);
                }
                Op::Softmax { input, axis } => {
                    let (a, axis) = (*input, *axis);
                    let y = nodes[id].values.clone();
                    let shape = nodes[id].shape.clone();
                    if nodes[a].needs_grad {
                        let da = &mut nodes[a].grad;
                        for_each_lane(&shape, axis, |lane| {
                            let dot: T = lane.iter().map(|&i| go[i] * y[i]).sum();
                            for &i in lane {
                                da[i] = da[i] + y[i] * (go[i] - dot);
                            }
                        });
                    }
                }
                Op::MaskedRowSoftmax { input, mask } => {
                    let a = *input;
                    let mask = Rc::clone(mask);
                    let y = nodes[id].values.clone();
                    let (rows, cols) = rows_cols(&nodes[id].shape);
                    if nodes[a].needs_grad {
                        let da = &mut nodes[a].grad;
                        for r in 0..rows {
                            let mut dot = T::zero();
                            for c in 0..cols {
                                let i = r * cols + c;
                                if mask[i] {
                                    dot = dot + go[i] * y[i];
                                }
                            }
                            for c in 0..cols {
                                let i = r * cols + c;
                                if mask[i] {
                                    da[i] = da[i] + y[i] * (go[i] - dot);
                                }
                            }
                        }
                    }
                }
                Op::LayerNorm { x, gain, bias, means, inv_stds } => {
                    let (x, gain, bias) = (*x, *gain, *bias);
                    let means = means.clone();
                    let inv_stds = inv_stds.clone();
                    let (rows, d) = rows_cols(&nodes[x].shape);
                    let xv = nodes[x].values.clone();
                    let gv = nodes[gain].values.clone();
                    let dn = T::from_f64(d as f64);

                    if nodes[gain].needs_grad || nodes[bias].needs_grad {
                        for r in 0..rows {
                            for c in 0..d {
                                let i = r * d + c;
                                let xhat = (xv[i] - means[r]) * inv_stds[r];
                                if nodes[gain].needs_grad {
                                    nodes[gain].grad[c] = nodes[gain].grad[c] + go[i] * xhat;
                                }
                                if nodes[bias].needs_grad {
                                    nodes[bias].grad[c] = nodes[bias].grad[c] + go[i];
                                }
                            }
                        }
                    }
                    if nodes[x].needs_grad {
                        let dx = &mut nodes[x].grad;
                        for r in 0..rows {
                            let mut m1 = T::zero();
                            let mut m2 = T::zero();
                            for c in 0..d {
                                let i = r * d + c;
                                let xhat = (xv[i] - means[r]) * inv_stds[r];
                                let gy = go[i] * gv[c];
                                m1 = m1 + gy;
                                m2 = m2 + gy * xhat;
                            }
                            m1 = m1 / dn;
                            m2 = m2 / dn;
                            for c in 0..d {
                                let i = r * d + c;
                                let xhat = (xv[i] - means[r]) * inv_stds[r];
                                let gy = go[i] * gv[c];
                                dx[i] = dx[i] + inv_stds[r] * (gy - m1 - xhat * m2);
                            }
                        }
                    }
                }
                Op::CrossEntropy { logits, targets, weights, probs } => {
                    let a = *logits;
                    let targets = targets.clone();
                    let weights = weights.clone();
                    let probs = probs.clone();
                    let vocab = nodes[a].shape[nodes[a].shape.len() - 1];
                    if nodes[a].needs_grad {
                        let da = &mut nodes[a].grad;
                        let g = go[0];
                        for (r, (&t, &w)) in targets.iter().zip(&weights).enumerate() {
                            if w == T::zero() {
                                continue;
                            }
                            for j in 0..vocab {
                                let i = r * vocab + j;
                                let ind = if j == t { T::one() } else { T::zero() };
                                da[i] = da[i] + g * w * (probs[i] - ind);
                            }
                        }
                    }
                }
            }
            // Restore the (consumed) output grad so callers can read it.
            nodes[id].grad = go;
        }
    }

    /// Adds leaf gradients into the store (`+=`, so multi-lease and
    /// cross-batch accumulation compose).
    pub fn write_grads_into(&self, store: &mut ParamStore<T>) {
        let inner = self.inner.borrow();
        for node in &inner.nodes {
            if let Op::Leaf { param: Some(id) } = node.op {
                let p = store.get_mut(id);
                debug_assert_eq!(p.grad.len(), node.grad.len());
                for (pg, ng) in p.grad.iter_mut().zip(&node.grad) {
                    *pg = *pg + *ng;
                }
            }
        }
    }
}

/// Accumulates `f(i)` into the grad of `target` if it needs grad.
fn accumulate<T: Real>(nodes: &mut [Node<T>], target: NodeId, f: impl Fn(usize) -> T) {
    if nodes[target].needs_grad {
        let g = &mut nodes[target].grad;
        for i in 0..g.len() {
            g[i] = g[i] + f(i);
        }
    }
}

fn accumulate_indexed<T: Real>(nodes: &mut [Node<T>], target: NodeId, f: impl Fn(usize) -> T) {
    accumulate(nodes, target, f)
}

/// Visits index lanes along `axis` for rank-1 or rank-2 shapes.
fn for_each_lane(shape: &[usize], axis: usize, mut f: impl FnMut(&[usize])) {
    match shape.len() {
        1 => {
            assert_eq!(axis, 0, "softmax: axis {axis} invalid for rank-1");
            let lane: Vec<usize> = (0..shape[0]).collect();
            f(&lane);
        }
        2 => {
            let (rows, cols) = (shape[0], shape[1]);
            match axis {
                1 => {
                    for r in 0..rows {
                        let lane: Vec<usize> = (r * cols..(r + 1) * cols).collect();
                        f(&lane);
                    }
                }
                0 => {
                    for c in 0..cols {
                        let lane: Vec<usize> = (0..rows).map(|r| r * cols + c).collect();
                        f(&lane);
                    }
                }
                _ => panic!("softmax: axis {axis} invalid for rank-2"),
            }
        }
        n => panic!("softmax: rank {n} unsupported"),
    }
}

// ── Tensor ops ───────────────────────────────────────────────────────

impl<T: Real> Tensor<T> {
    pub fn tape(&self) -> &Tape<T> {
        &self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.inner.borrow().nodes[self.node].shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.tape.inner.borrow().nodes[self.node].values.len()
    }

    pub fn values(&self) -> Vec<T> {
        self.tape.inner.borrow().nodes[self.node].values.clone()
    }

    pub fn grad(&self) -> Vec<T> {
        self.tape.inner.borrow().nodes[self.node].grad.clone()
    }

    /// Value of a one-element tensor.
    pub fn scalar(&self) -> T {
        let inner = self.tape.inner.borrow();
        let vals = &inner.nodes[self.node].values;
        assert_eq!(vals.len(), 1, "scalar: tensor has {} elements", vals.len());
        vals[0]
    }

    pub fn scalar_f64(&self) -> f64 {
        self.scalar().into_f64()
    }

    fn same_shape_binary(&self, other: &Tensor<T>, name: &str) -> (Vec<usize>, Vec<T>, Vec<T>, bool) {
        self.tape.check_same_tape(other);
        let inner = self.tape.inner.borrow();
        let a = &inner.nodes[self.node];
        let b = &inner.nodes[other.node];
        assert_eq!(a.shape, b.shape, "{name}: shape mismatch {:?} vs {:?}", a.shape, b.shape);
        (a.shape.clone(), a.values.clone(), b.values.clone(), a.needs_grad || b.needs_grad)
    }

    pub fn add(&self, other: &Tensor<T>) -> Tensor<T> {
        let (shape, av, bv, needs) = self.same_shape_binary(other, "add");
        let values = av.iter().zip(&bv).map(|(&a, &b)| a + b).collect();
        self.tape.push(Op::Add(self.node, other.node), shape, values, needs)
    }

    pub fn sub(&self, other: &Tensor<T>) -> Tensor<T> {
        let (shape, av, bv, needs) = self.same_shape_binary(other, "sub");
        let values = av.iter().zip(&bv).map(|(&a, &b)| a - b).collect();
        self.tape.push(Op::Sub(self.node, other.node), shape, values, needs)
    }

    pub fn mul(&self, other: &Tensor<T>) -> Tensor<T> {
        let (shape, av, bv, needs) = self.same_shape_binary(other, "mul");
        let values = av.iter().zip(&bv).map(|(&a, &b)| a * b).collect();
        self.tape.push(Op::Mul(self.node, other.node), shape, values, needs)
    }

    pub fn neg(&self) -> Tensor<T> {
        let inner = self.tape.inner.borrow();
        let node = &inner.nodes[self.node];
        let (shape, values, needs) =
            (node.shape.clone(), node.values.iter().map(|&v| -v).collect(), node.needs_grad);
        drop(inner);
        self.tape.push(Op::Neg(self.node), shape, values, needs)
    }

    pub fn add_scalar(&self, c: T) -> Tensor<T> {
        let inner = self.tape.inner.borrow();
        let node = &inner.nodes[self.node];
        let (shape, values, needs) =
            (node.shape.clone(), node.values.iter().map(|&v| v + c).collect(), node.needs_grad);
        drop(inner);
        self.tape.push(Op::AddScalar(self.node), shape, values, needs)
    }

    pub fn mul_scalar(&self, c: T) -> Tensor<T> {
        let inner = self.tape.inner.borrow();
        let node = &inner.nodes[self.node];
        let (shape, values, needs) =
            (node.shape.clone(), node.values.iter().map(|&v| v * c).collect(), node.needs_grad);
        drop(inner);
        self.tape.push(Op::MulScalar(self.node, c), shape, values, needs)
    }

    pub fn exp(&self) -> Tensor<T> {
        let inner = self.tape.inner.borrow();
        let node = &inner.nodes[self.node];
        let (shape, values, needs): (_, Vec<T>, _) =
            (node.shape.clone(), node.values.iter().map(|&v| v.exp()).collect(), node.needs_grad);
        drop(inner);
        self.tape.push(Op::Exp(self.node), shape, values, needs)
    }

    pub fn relu(&self) -> Tensor<T> {
        let inner = self.tape.inner.borrow();
        let node = &inner.nodes[self.node];
        let values = node.values.iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
        let (shape, needs) = (node.shape.clone(), node.needs_grad);
        drop(inner);
        self.tape.push(Op::Relu(self.node), shape, values, needs)
    }

    /// Clamps values to [lo, hi]; gradient passes only strictly inside.
    pub fn clamp(&self, lo: T, hi: T) -> Tensor<T> {
        let inner = self.tape.inner.borrow();
        let node = &inner.nodes[self.node];
        let values = node
            .values
            .iter()
            .map(|&v| if v < lo { lo } else if v > hi { hi } else { v })
            .collect();
        let (shape, needs) = (node.shape.clone(), node.needs_grad);
        drop(inner);
        self.tape.push(Op::Clamp { input: self.node, lo, hi }, shape, values, needs)
    }

    pub fn matmul(&self, other: &Tensor<T>) -> Tensor<T> {
        self.tape.check_same_tape(other);
        let inner = self.tape.inner.borrow();
        let a = &inner.nodes[self.node];
        let b = &inner.nodes[other.node];
        assert_eq!(a.shape.len(), 2, "matmul: lhs must be rank-2, got {:?}", a.shape);
        assert_eq!(b.shape.len(), 2, "matmul: rhs must be rank-2, got {:?}", b.shape);
        let (m, k) = (a.shape[0], a.shape[1]);
        let (k2, n) = (b.shape[0], b.shape[1]);
        assert_eq!(k, k2, "matmul: inner dims {k} vs {k2}");
        let mut values = vec![T::zero(); m * n];
        for i in 0..m {
            for p in 0..k {
                let a_ip = a.values[i * k + p];
                if a_ip != T::zero() {
                    for j in 0..n {
                        values[i * n + j] = values[i * n + j] + a_ip * b.values[p * n + j];
                    }
                }
            }
        }
        let needs = a.needs_grad || b.needs_grad;
        drop(inner);
        self.tape.push(
            Op::Matmul { a: self.node, b: other.node, m, k, n },
            vec![m, n],
            values,
            needs,
        )
    }

    pub fn transpose(&self) -> Tensor<T> {
        let inner = self.tape.inner.borrow();
        let node = &inner.nodes[self.node];
        assert_eq!(node.shape.len(), 2, "transpose: rank-2 only, got {:?}", node.shape);
        let (rows, cols) = (node.shape[0], node.shape[1]);
        let mut values = vec![T::zero(); rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                values[c * rows + r] = node.values[r * cols + c];
            }
        }
        let needs = node.needs_grad;
        drop(inner);
        self.tape.push(
            Op::Transpose { input: self.node, rows, cols },
            vec![cols, rows],
            values,
            needs,
        )
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> Tensor<T> {
        let inner = self.tape.inner.borrow();
        let node = &inner.nodes[self.node];
        assert_eq!(node.shape.len(), 2, "slice_rows: rank-2 only");
        let (rows, cols) = (node.shape[0], node.shape[1]);
        assert!(start + len <= rows, "slice_rows: {start}+{len} > {rows}");
        let values = node.values[start * cols..(start + len) * cols].to_vec();
        let needs = node.needs_grad;
        drop(inner);
        self.tape.push(Op::SliceRows { input: self.node, start }, vec![len, cols], values, needs)
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Tensor<T> {
        let inner = self.tape.inner.borrow();
        let node = &inner.nodes[self.node];
        assert_eq!(node.shape.len(), 2, "slice_cols: rank-2 only");
        let (rows, cols) = (node.shape[0], node.shape[1]);
        assert!(start + len <= cols, "slice_cols: {start}+{len} > {cols}");
        let mut values = Vec::with_capacity(rows * len);
        for r in 0..rows {
            values.extend_from_slice(&node.values[r * cols + start..r * cols + start + len]);
        }
        let needs = node.needs_grad;
        drop(inner);
        self.tape.push(Op::SliceCols { input: self.node, start }, vec![rows, len], values, needs)
    }

    /// Broadcast-adds a [d] (or [1 x d]) row onto every row of a [n x d] tensor.
    pub fn add_row(&self, row: &Tensor<T>) -> Tensor<T> {
        self.tape.check_same_tape(row);
        let inner = self.tape.inner.borrow();
        let x = &inner.nodes[self.node];
        let r = &inner.nodes[row.node];
        let (rows, cols) = rows_cols(&x.shape);
        assert_eq!(r.values.len(), cols, "add_row: row width {} vs cols {cols}", r.values.len());
        let mut values = x.values.clone();
        for i in 0..rows {
            for c in 0..cols {
                values[i * cols + c] = values[i * cols + c] + r.values[c];
            }
        }
        let needs = x.needs_grad || r.needs_grad;
        let shape = x.shape.clone();
        drop(inner);
        self.tape.push(Op::AddRow { x: self.node, row: row.node }, shape, values, needs)
    }

    pub fn sum_all(&self) -> Tensor<T> {
        let inner = self.tape.inner.borrow();
        let node = &inner.nodes[self.node];
        let total: T = node.values.iter().copied().sum();
        let needs = node.needs_grad;
        drop(inner);
        self.tape.push(Op::SumAll(self.node), vec![1], vec![total], needs)
    }

    pub fn mean_all(&self) -> Tensor<T> {
        let inner = self.tape.inner.borrow();
        let node = &inner.nodes[self.node];
        let n = T::from_f64(node.values.len() as f64);
        let total: T = node.values.iter().copied().sum();
        let needs = node.needs_grad;
        drop(inner);
        self.tape.push(Op::MeanAll(self.node), vec![1], vec![total / n], needs)
    }

    /// Numerically stable softmax along `axis` (max-subtraction).
    pub fn softmax(&self, axis: usize) -> Tensor<T> {
        let inner = self.tape.inner.borrow();
        let node = &inner.nodes[self.node];
        let shape = node.shape.clone();
        for &v in &node.values {
            assert!(v.is_finite(), "softmax: non-finite input");
        }
        let mut values = node.values.clone();
        for_each_lane(&shape, axis, |lane| {
            let mut max = values[lane[0]];
            for &i in lane {
                if values[i] > max {
                    max = values[i];
                }
            }
            let mut z = T::zero();
            for &i in lane {
                values[i] = (values[i] - max).exp();
                z = z + values[i];
            }
            for &i in lane {
                values[i] = values[i] / z;
            }
        });
        let needs = node.needs_grad;
        drop(inner);
        self.tape.push(Op::Softmax { input: self.node, axis }, shape, values, needs)
    }

    /// Row softmax restricted to mask-permitted entries; masked outputs are
    /// exactly zero, so downstream values cannot depend on masked inputs.
    pub fn masked_row_softmax(&self, mask: &Rc<Vec<bool>>) -> Tensor<T> {
        let inner = self.tape.inner.borrow();
        let node = &inner.nodes[self.node];
        let (rows, cols) = rows_cols(&node.shape);
        assert_eq!(mask.len(), rows * cols, "masked_softmax: mask size mismatch");
        let mut values = vec![T::zero(); rows * cols];
        for r in 0..rows {
            let mut max: Option<T> = None;
            for c in 0..cols {
                let i = r * cols + c;
                if mask[i] {
                    let v = node.values[i];
                    assert!(v.is_finite(), "masked_softmax: non-finite input at row {r}");
                    max = Some(match max {
                        None => v,
                        Some(m) if v > m => v,
                        Some(m) => m,
                    });
                }
            }
            let max = max.unwrap_or_else(|| panic!("masked_softmax: fully masked row {r}"));
            let mut z = T::zero();
            for c in 0..cols {
                let i = r * cols + c;
                if mask[i] {
                    let e = (node.values[i] - max).exp();
                    values[i] = e;
                    z = z + e;
                }
            }
            for c in 0..cols {
                let i = r * cols + c;
                if mask[i] {
                    values[i] = values[i] / z;
                }
            }
        }
        let needs = node.needs_grad;
        let shape = node.shape.clone();
        drop(inner);
        self.tape.push(
            Op::MaskedRowSoftmax { input: self.node, mask: Rc::clone(mask) },
            shape,
            values,
            needs,
        )
    }

    /// Per-row normalization over the last axis, then affine by gain/bias.
    pub fn layer_norm(&self, gain: &Tensor<T>, bias: &Tensor<T>, eps: f64) -> Tensor<T> {
        self.tape.check_same_tape(gain);
        self.tape.check_same_tape(bias);
        assert!(eps > 0.0, "layer_norm: eps must be positive");
        let inner = self.tape.inner.borrow();
        let x = &inner.nodes[self.node];
        let g = &inner.nodes[gain.node];
        let b = &inner.nodes[bias.node];
        let (rows, d) = rows_cols(&x.shape);
        assert_eq!(g.values.len(), d, "layer_norm: gain width {} vs {d}", g.values.len());
        assert_eq!(b.values.len(), d, "layer_norm: bias width {} vs {d}", b.values.len());
        let eps_t = T::from_f64(eps);
        let dn = T::from_f64(d as f64);
        let mut values = vec![T::zero(); rows * d];
        let mut means = Vec::with_capacity(rows);
        let mut inv_stds = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &x.values[r * d..(r + 1) * d];
            let mean: T = row.iter().copied().sum::<T>() / dn;
            let var: T = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let inv = T::one() / (var + eps_t).sqrt();
            means.push(mean);
            inv_stds.push(inv);
            for c in 0..d {
                values[r * d + c] = (row[c] - mean) * inv * g.values[c] + b.values[c];
            }
        }
        let needs = x.needs_grad || g.needs_grad || b.needs_grad;
        let shape = x.shape.clone();
        drop(inner);
        self.tape.push(
            Op::LayerNorm { x: self.node, gain: gain.node, bias: bias.node, means, inv_stds },
            shape,
            values,
            needs,
        )
    }

    /// Backpropagates from this scalar; gradients stay on the tape.
    pub fn backward(&self) {
        self.tape.backward_from(self.node);
    }

    /// `backward` plus accumulation of leaf grads into the store.
    pub fn backward_into(&self, store: &mut ParamStore<T>) {
        self.backward();
        self.tape.write_grads_into(store);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const TOL: f64 = 1e-12;

    fn assert_close(actual: &[f64], expected: &[f64], tol: f64) {
        assert_eq!(actual.len(), expected.len());
        for (i, (a, e)) in actual.iter().zip(expected).enumerate() {
            assert!((a - e).abs() <= tol, "index {i}: {a} vs {e}");
        }
    }

    #[test]
    fn softmax_symmetry_and_ratio() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.constant(vec![0.0, 0.0], vec![2]);
        assert_close(&x.softmax(0).values(), &[0.5, 0.5], TOL);

        let y = tape.constant(vec![2.0f64.ln(), 0.0], vec![2]);
        assert_close(&y.softmax(0).values(), &[2.0 / 3.0, 1.0 / 3.0], 1e-12);
    }

    #[test]
    fn softmax_large_inputs_do_not_overflow() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.constant(vec![1000.0, 0.0], vec![2]);
        let s = x.softmax(0).values();
        assert!((s[0] - 1.0).abs() < 1e-12);
        assert!(s[1] >= 0.0 && s[1] < 1e-300);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.constant(vec![0.3, -1.2, 5.0, 2.0, 2.0, 2.0], vec![2, 3]);
        let s = x.softmax(1).values();
        for r in 0..2 {
            let sum: f64 = s[r * 3..(r + 1) * 3].iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
            assert!(s[r * 3..(r + 1) * 3].iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    #[should_panic(expected = "softmax: non-finite input")]
    fn softmax_rejects_non_finite() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.constant(vec![f64::NAN, 0.0], vec![2]);
        let _ = x.softmax(0);
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.constant(vec![3.0, 3.0, 3.0], vec![1, 3]);
        let g = tape.constant(vec![1.0, 1.0, 1.0], vec![3]);
        let b = tape.constant(vec![0.0, 0.0, 0.0], vec![3]);
        assert_close(&x.layer_norm(&g, &b, 1e-6).values(), &[0.0, 0.0, 0.0], TOL);
    }

    #[test]
    fn layer_norm_unit_example() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.constant(vec![1.0, -1.0], vec![1, 2]);
        let g = tape.constant(vec![1.0, 1.0], vec![2]);
        let b = tape.constant(vec![0.0, 0.0], vec![2]);
        assert_close(&x.layer_norm(&g, &b, 1e-12).values(), &[1.0, -1.0], 1e-9);
    }

    #[test]
    fn layer_norm_shift_invariance() {
        let tape: Tape<f64> = Tape::new();
        let vals = vec![0.4, -2.0, 1.7, 0.1];
        let x = tape.constant(vals.clone(), vec![1, 4]);
        let shifted = tape.constant(vals.iter().map(|v| v + 11.25).collect(), vec![1, 4]);
        let g = tape.constant(vec![1.3, 0.2, -0.7, 2.0], vec![4]);
        let b = tape.constant(vec![0.5, 0.0, -1.0, 0.25], vec![4]);
        assert_close(
            &x.layer_norm(&g, &b, 1e-6).values(),
            &shifted.layer_norm(&g, &b, 1e-6).values(),
            1e-9,
        );
    }

    #[test]
    fn cross_entropy_uniform_and_perfect() {
        let tape: Tape<f64> = Tape::new();
        let uniform = tape.constant(vec![0.0; 4], vec![1, 4]);
        let ce = tape.cross_entropy(&uniform, &[2], &[1.0]);
        assert!((ce.scalar() - 4.0f64.ln()).abs() < 1e-12);

        let sure = tape.constant(vec![500.0, 0.0, 0.0], vec![1, 3]);
        let ce = tape.cross_entropy(&sure, &[0], &[1.0]);
        assert!(ce.scalar().abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_masked_positions_contribute_zero() {
        let tape: Tape<f64> = Tape::new();
        let logits = tape.constant(
            vec![
                0.3, -1.0, 2.0, // real
                1.1, 0.4, -0.2, // real
                9.0, 9.0, 9.0, // padded
                -3.0, 0.0, 1.0, // padded
                5.0, -5.0, 0.0, // padded
            ],
            vec![5, 3],
        );
        let padded = tape.cross_entropy(&logits, &[2, 0, 0, 0, 0], &[1.0, 1.0, 0.0, 0.0, 0.0]);
        let bare = tape.cross_entropy(
            &logits.slice_rows(0, 2),
            &[2, 0],
            &[1.0, 1.0],
        );
        assert!((padded.scalar() - bare.scalar()).abs() < 1e-12);
    }

    #[test]
    #[should_panic(expected = "target id 7 out of range")]
    fn cross_entropy_rejects_bad_target() {
        let tape: Tape<f64> = Tape::new();
        let logits = tape.constant(vec![0.0; 4], vec![1, 4]);
        let _ = tape.cross_entropy(&logits, &[7], &[1.0]);
    }

    #[test]
    fn backward_square() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let x = store.register("x", vec![1], vec![3.0]);
        let tape = Tape::new();
        let xt = tape.param(&store, x);
        let y = xt.mul(&xt);
        y.backward_into(&mut store);
        assert_eq!(y.scalar(), 9.0);
        assert_eq!(store.get(x).grad, vec![6.0]);
    }

    #[test]
    fn softmax_cross_entropy_grad_is_probs_minus_onehot() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let id = store.register("logits", vec![1, 4], vec![0.2, -1.0, 0.5, 2.0]);
        let tape = Tape::new();
        let logits = tape.param(&store, id);
        let loss = tape.cross_entropy(&logits, &[1], &[1.0]);
        loss.backward_into(&mut store);
        let probs = logits.softmax(1).values();
        let expected: Vec<f64> = probs
            .iter()
            .enumerate()
            .map(|(j, &p)| if j == 1 { p - 1.0 } else { p })
            .collect();
        assert_close(&store.get(id).grad, &expected, 1e-12);
    }

    #[test]
    #[should_panic(expected = "backward: loss must be scalar")]
    fn backward_rejects_non_scalar() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.constant(vec![1.0, 2.0], vec![2]);
        x.backward();
    }

    #[test]
    fn backward_is_bitwise_deterministic() {
        let run = || {
            let mut store: ParamStore<f64> = ParamStore::new();
            let w = store.register("w", vec![3, 3], vec![0.1, -0.2, 0.3, 0.4, 0.5, -0.6, 0.7, 0.8, 0.9]);
            let tape = Tape::new();
            let wt = tape.param(&store, w);
            let x = tape.constant(vec![1.0, 2.0, 3.0], vec![1, 3]);
            let loss = x.matmul(&wt).relu().sum_all();
            loss.backward_into(&mut store);
            store.get(w).grad.clone()
        };
        let a = run();
        let b = run();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn matmul_values_and_grads() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let a = store.register("a", vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = store.register("b", vec![3, 2], vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let tape = Tape::new();
        let at = tape.param(&store, a);
        let bt = tape.param(&store, b);
        let c = at.matmul(&bt);
        assert_close(&c.values(), &[4.0, 5.0, 10.0, 11.0], TOL);
        c.sum_all().backward_into(&mut store);
        // d(sum)/dA = ones @ B^T.
        assert_close(&store.get(a).grad, &[1.0, 1.0, 2.0, 1.0, 1.0, 2.0], TOL);
        // d(sum)/dB = A^T @ ones.
        assert_close(&store.get(b).grad, &[5.0, 5.0, 7.0, 7.0, 9.0, 9.0], TOL);
    }

    #[test]
    fn embedding_gathers_and_scatters() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let table = store.register("emb", vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let tape = Tape::new();
        let tt = tape.param(&store, table);
        let rows = tape.embedding(&tt, &[2, 0, 2]);
        assert_close(&rows.values(), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0], TOL);
        rows.sum_all().backward_into(&mut store);
        assert_close(&store.get(table).grad, &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0], TOL);
    }

    #[test]
    fn concat_and_slice_round_trip() {
        let tape: Tape<f64> = Tape::new();
        let a = tape.constant(vec![1.0, 2.0, 3.0, 4.0], vec![2, 2]);
        let b = tape.constant(vec![5.0, 6.0], vec![2, 1]);
        let cat = tape.concat_cols(&[a.clone(), b.clone()]);
        assert_eq!(cat.shape(), vec![2, 3]);
        assert_close(&cat.values(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0], TOL);
        assert_close(&cat.slice_cols(0, 2).values(), &a.values(), TOL);
        assert_close(&cat.slice_cols(2, 1).values(), &b.values(), TOL);

        let rcat = tape.concat_rows(&[a.clone(), a.clone()]);
        assert_eq!(rcat.shape(), vec![4, 2]);
        assert_close(&rcat.slice_rows(2, 2).values(), &a.values(), TOL);
    }

    #[test]
    fn masked_softmax_zeroes_disallowed_entries() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.constant(vec![1.0, 100.0, 2.0, 3.0], vec![2, 2]);
        let mask = Rc::new(vec![true, false, true, true]);
        let y = x.masked_row_softmax(&mask).values();
        assert_eq!(y[1], 0.0);
        assert!((y[0] - 1.0).abs() < 1e-12);
        let s: f64 = y[2] + y[3];
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    #[should_panic(expected = "fully masked row")]
    fn masked_softmax_rejects_empty_row() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.constant(vec![1.0, 2.0], vec![1, 2]);
        let mask = Rc::new(vec![false, false]);
        let _ = x.masked_row_softmax(&mask);
    }

    #[test]
    fn unreachable_params_have_zero_grad() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let used = store.register("used", vec![1], vec![2.0]);
        let unused = store.register("unused", vec![1], vec![5.0]);
        let tape = Tape::new();
        let u = tape.param(&store, used);
        u.mul(&u).backward_into(&mut store);
        assert_eq!(store.get(used).grad, vec![4.0]);
        assert_eq!(store.get(unused).grad, vec![0.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let w = store.register("w", vec![2], vec![1.0, 2.0]);
        let tape = Tape::new();
        let wt = tape.param(&store, w);
        let noise = tape.constant(vec![0.5, -0.5], vec![2]);
        let loss = wt.mul(&noise).sum_all();
        loss.backward_into(&mut store);
        assert_close(&store.get(w).grad, &[0.5, -0.5], TOL);
        assert_eq!(noise.grad(), vec![0.0, 0.0]);
    }

    #[test]
    fn clamp_gradient_blocks_outside_range() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let x = store.register("x", vec![3], vec![-2.0, 0.5, 3.0]);
        let tape = Tape::new();
        let xt = tape.param(&store, x);
        xt.clamp(-1.0, 1.0).sum_all().backward_into(&mut store);
        assert_close(&store.get(x).grad, &[0.0, 1.0, 0.0], TOL);
    }

    #[test]
    fn add_row_broadcasts_and_accumulates() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let bias = store.register("b", vec![2], vec![10.0, 20.0]);
        let tape = Tape::new();
        let x = tape.constant(vec![1.0, 2.0, 3.0, 4.0], vec![2, 2]);
        let bt = tape.param(&store, bias);
        let y = x.add_row(&bt);
        assert_close(&y.values(), &[11.0, 22.0, 13.0, 24.0], TOL);
        y.sum_all().backward_into(&mut store);
        assert_close(&store.get(bias).grad, &[2.0, 2.0], TOL);
    }
}
