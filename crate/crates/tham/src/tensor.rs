//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! Everything is two-dimensional: row vectors are `1 x n` and scalars are
//! `1 x 1`. A [`Tensor`] is a reference-counted node in an implicit
//! computation graph. Each operation stores its forward value plus one
//! vector-Jacobian closure per differentiable input; [`Tensor::backward`]
//! walks the graph once in reverse topological order and accumulates
//! gradients into every node that (transitively) depends on a trainable
//! leaf.
//!
//! Invariants kept by this module:
//! - a node consumed by several downstream ops receives the sum of all
//!   incoming gradient contributions;
//! - graph construction is single-threaded and node ids are monotone, so
//!   the accumulation order (and therefore every float) is deterministic;
//! - constants never allocate gradient buffers.
//!
//! Finiteness is not policed here; the trainer checks the loss value once
//! per step and aborts with a numeric error if it is not finite.

use std::cell::{Ref, RefCell, RefMut};
use std::collections::HashSet;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{concatenate, s, Array1, Array2, Axis};
use rand::Rng;

use crate::error::{Error, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

type Vjp = Box<dyn Fn(&Array2<f64>) -> Array2<f64>>;

/// Which statistics normalization layers use and whether they may update
/// internal state.
///
/// - `Train`: batch statistics, running statistics are updated, dropout on.
/// - `Frozen`: batch statistics, but no state updates and no stochastic ops.
///   This is what gradient checking uses: the forward pass must be a pure
///   function of the parameters.
/// - `Eval`: running statistics, no updates, no stochastic ops.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Phase {
    Train,
    Frozen,
    Eval,
}

struct Inner {
    id: u64,
    values: RefCell<Array2<f64>>,
    grad: RefCell<Option<Array2<f64>>>,
    parents: Vec<Tensor>,
    vjps: Vec<Vjp>,
    trainable: bool,
    needs_grad: bool,
}

#[derive(Clone)]
pub struct Tensor {
    inner: Rc<Inner>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let (r, c) = self.shape();
        write!(f, "Tensor(id={}, {}x{})", self.inner.id, r, c)
    }
}

impl Tensor {
    fn new(values: Array2<f64>, parents: Vec<Tensor>, vjps: Vec<Vjp>, trainable: bool) -> Tensor {
        debug_assert_eq!(parents.len(), vjps.len());
        let needs_grad = trainable || parents.iter().any(|p| p.inner.needs_grad);
        Tensor {
            inner: Rc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                values: RefCell::new(values),
                grad: RefCell::new(None),
                parents,
                vjps,
                trainable,
                needs_grad,
            }),
        }
    }

    fn from_op(values: Array2<f64>, parents: Vec<Tensor>, vjps: Vec<Vjp>) -> Tensor {
        Tensor::new(values, parents, vjps, false)
    }

    /// Non-trainable leaf. Gradients are never accumulated into it.
    pub fn constant(values: Array2<f64>) -> Tensor {
        Tensor::new(values, Vec::new(), Vec::new(), false)
    }

    /// Trainable leaf.
    pub fn param(values: Array2<f64>) -> Tensor {
        Tensor::new(values, Vec::new(), Vec::new(), true)
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::constant(Array2::from_elem((1, 1), v))
    }

    pub fn row(vals: &[f64]) -> Tensor {
        Tensor::constant(Array2::from_shape_vec((1, vals.len()), vals.to_vec()).unwrap())
    }

    pub fn from_vec(rows: usize, cols: usize, vals: Vec<f64>) -> Result<Tensor> {
        if vals.len() != rows * cols {
            return Err(Error::Config(format!(
                "from_vec: {} values cannot fill a {} x {} matrix",
                vals.len(),
                rows,
                cols
            )));
        }
        Ok(Tensor::constant(
            Array2::from_shape_vec((rows, cols), vals).unwrap(),
        ))
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> (usize, usize) {
        let v = self.inner.values.borrow();
        (v.nrows(), v.ncols())
    }

    pub fn rows(&self) -> usize {
        self.shape().0
    }

    pub fn cols(&self) -> usize {
        self.shape().1
    }

    pub fn values(&self) -> Ref<'_, Array2<f64>> {
        self.inner.values.borrow()
    }

    pub fn values_mut(&self) -> RefMut<'_, Array2<f64>> {
        self.inner.values.borrow_mut()
    }

    pub fn value_at(&self, r: usize, c: usize) -> f64 {
        self.inner.values.borrow()[[r, c]]
    }

    /// Value of a `1 x 1` tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.shape(), (1, 1));
        self.value_at(0, 0)
    }

    pub fn is_trainable(&self) -> bool {
        self.inner.trainable
    }

    pub fn all_finite(&self) -> bool {
        self.inner.values.borrow().iter().all(|v| v.is_finite())
    }

    /// Shift one entry in place. Used by finite-difference checks.
    pub fn nudge(&self, r: usize, c: usize, delta: f64) {
        self.inner.values.borrow_mut()[[r, c]] += delta;
    }

    /// Replace the stored values. Shapes must match.
    pub fn assign(&self, values: Array2<f64>) -> Result<()> {
        let mut v = self.inner.values.borrow_mut();
        if v.dim() != values.dim() {
            return Err(Error::shape(
                "assign",
                (v.nrows(), v.ncols()),
                (values.nrows(), values.ncols()),
            ));
        }
        *v = values;
        Ok(())
    }

    pub fn grad(&self) -> Option<Array2<f64>> {
        self.inner.grad.borrow().clone()
    }

    pub fn grad_or_zeros(&self) -> Array2<f64> {
        let (r, c) = self.shape();
        self.inner
            .grad
            .borrow()
            .clone()
            .unwrap_or_else(|| Array2::zeros((r, c)))
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    fn add_grad(&self, contribution: Array2<f64>) {
        let mut g = self.inner.grad.borrow_mut();
        match g.as_mut() {
            Some(g) => *g += &contribution,
            None => *g = Some(contribution),
        }
    }

    /// Postorder over the reachable graph: parents before consumers.
    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut visited = HashSet::new();
        let mut stack: Vec<(Tensor, usize)> = Vec::new();
        visited.insert(self.inner.id);
        stack.push((self.clone(), 0));
        while let Some((node, next_parent)) = stack.pop() {
            if next_parent < node.inner.parents.len() {
                let parent = node.inner.parents[next_parent].clone();
                stack.push((node, next_parent + 1));
                if visited.insert(parent.inner.id) {
                    stack.push((parent, 0));
                }
            } else {
                order.push(node);
            }
        }
        order
    }

    /// Backpropagate from a scalar loss. Gradients accumulate into every
    /// node on a path to a trainable leaf; intermediate buffers are
    /// released as soon as they have been propagated.
    pub fn backward(&self) {
        assert_eq!(self.shape(), (1, 1), "backward() expects a 1 x 1 loss");
        let order = self.topo_order();
        self.add_grad(Array2::ones((1, 1)));
        for node in order.iter().rev() {
            let grad = {
                let g = node.inner.grad.borrow();
                match g.as_ref() {
                    Some(g) => g.clone(),
                    None => continue,
                }
            };
            for (parent, vjp) in node.inner.parents.iter().zip(node.inner.vjps.iter()) {
                if parent.inner.needs_grad {
                    parent.add_grad(vjp(&grad));
                }
            }
            if !node.inner.trainable && !node.inner.parents.is_empty() {
                *node.inner.grad.borrow_mut() = None;
            }
        }
    }

    // ---- elementwise and shape ops ----

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape() != other.shape() {
            return Err(Error::shape("add", self.shape(), other.shape()));
        }
        let out = &*self.values() + &*other.values();
        Ok(Tensor::from_op(
            out,
            vec![self.clone(), other.clone()],
            vec![
                Box::new(|g| g.clone()),
                Box::new(|g| g.clone()),
            ],
        ))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape() != other.shape() {
            return Err(Error::shape("sub", self.shape(), other.shape()));
        }
        let out = &*self.values() - &*other.values();
        Ok(Tensor::from_op(
            out,
            vec![self.clone(), other.clone()],
            vec![Box::new(|g| g.clone()), Box::new(|g| -g)],
        ))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape() != other.shape() {
            return Err(Error::shape("mul", self.shape(), other.shape()));
        }
        let out = &*self.values() * &*other.values();
        let a = self.clone();
        let b = other.clone();
        Ok(Tensor::from_op(
            out,
            vec![self.clone(), other.clone()],
            vec![
                Box::new(move |g| g * &*b.values()),
                Box::new(move |g| g * &*a.values()),
            ],
        ))
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (ar, ac) = self.shape();
        let (br, bc) = other.shape();
        if ac != br {
            return Err(Error::shape("matmul", (ar, ac), (br, bc)));
        }
        let out = self.values().dot(&*other.values());
        let a = self.clone();
        let b = other.clone();
        Ok(Tensor::from_op(
            out,
            vec![self.clone(), other.clone()],
            vec![
                Box::new(move |g| {
                    let bv = b.values();
                    g.dot(&bv.t())
                }),
                Box::new(move |g| {
                    let av = a.values();
                    av.t().dot(g)
                }),
            ],
        ))
    }

    pub fn transpose(&self) -> Tensor {
        let out = self.values().t().to_owned();
        Tensor::from_op(
            out,
            vec![self.clone()],
            vec![Box::new(|g| g.t().to_owned())],
        )
    }

    /// `y = k * x + c`, elementwise with scalar constants.
    pub fn affine(&self, k: f64, c: f64) -> Tensor {
        let out = self.values().mapv(|v| k * v + c);
        Tensor::from_op(out, vec![self.clone()], vec![Box::new(move |g| g * k)])
    }

    pub fn scale(&self, k: f64) -> Tensor {
        self.affine(k, 0.0)
    }

    /// Multiply every entry by a `1 x 1` tensor (the scalar stays
    /// differentiable, unlike [`Tensor::scale`]).
    pub fn scale_by(&self, s: &Tensor) -> Result<Tensor> {
        if s.shape() != (1, 1) {
            return Err(Error::shape("scale_by", s.shape(), (1, 1)));
        }
        let sv = s.item();
        let out = self.values().mapv(|v| v * sv);
        let a = self.clone();
        let s_t = s.clone();
        Ok(Tensor::from_op(
            out,
            vec![self.clone(), s.clone()],
            vec![
                Box::new(move |g| g * s_t.item()),
                Box::new(move |g| {
                    let dot = (g * &*a.values()).sum();
                    Array2::from_elem((1, 1), dot)
                }),
            ],
        ))
    }

    /// Broadcast-add a `1 x c` bias to every row.
    pub fn add_bias_rows(&self, bias: &Tensor) -> Result<Tensor> {
        let (_, c) = self.shape();
        if bias.shape() != (1, c) {
            return Err(Error::shape("add_bias_rows", self.shape(), bias.shape()));
        }
        let out = &*self.values() + &*bias.values();
        Ok(Tensor::from_op(
            out,
            vec![self.clone(), bias.clone()],
            vec![
                Box::new(|g| g.clone()),
                Box::new(|g| g.sum_axis(Axis(0)).insert_axis(Axis(0))),
            ],
        ))
    }

    pub fn concat_rows(parts: &[Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::Config("concat_rows: no inputs".into()));
        }
        let cols = parts[0].cols();
        for p in parts {
            if p.cols() != cols {
                return Err(Error::shape("concat_rows", parts[0].shape(), p.shape()));
            }
        }
        let owned: Vec<Array2<f64>> = parts.iter().map(|p| p.values().clone()).collect();
        let views: Vec<_> = owned.iter().map(|a| a.view()).collect();
        let out = concatenate(Axis(0), &views).expect("checked shapes");
        let mut vjps: Vec<Vjp> = Vec::with_capacity(parts.len());
        let mut offset = 0usize;
        for p in parts {
            let start = offset;
            let len = p.rows();
            offset += len;
            vjps.push(Box::new(move |g| {
                g.slice(s![start..start + len, ..]).to_owned()
            }));
        }
        Ok(Tensor::from_op(out, parts.to_vec(), vjps))
    }

    pub fn concat_cols(parts: &[Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::Config("concat_cols: no inputs".into()));
        }
        let rows = parts[0].rows();
        for p in parts {
            if p.rows() != rows {
                return Err(Error::shape("concat_cols", parts[0].shape(), p.shape()));
            }
        }
        let owned: Vec<Array2<f64>> = parts.iter().map(|p| p.values().clone()).collect();
        let views: Vec<_> = owned.iter().map(|a| a.view()).collect();
        let out = concatenate(Axis(1), &views).expect("checked shapes");
        let mut vjps: Vec<Vjp> = Vec::with_capacity(parts.len());
        let mut offset = 0usize;
        for p in parts {
            let start = offset;
            let len = p.cols();
            offset += len;
            vjps.push(Box::new(move |g| {
                g.slice(s![.., start..start + len]).to_owned()
            }));
        }
        Ok(Tensor::from_op(out, parts.to_vec(), vjps))
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Tensor> {
        let (r, c) = self.shape();
        if start + len > c {
            return Err(Error::Index {
                op: "slice_cols",
                index: start + len,
                len: c,
            });
        }
        let out = self.values().slice(s![.., start..start + len]).to_owned();
        Ok(Tensor::from_op(
            out,
            vec![self.clone()],
            vec![Box::new(move |g| {
                let mut full = Array2::zeros((r, c));
                full.slice_mut(s![.., start..start + len]).assign(g);
                full
            })],
        ))
    }

    /// Select rows by index. Duplicate indices are allowed; their gradient
    /// contributions accumulate on the shared source row.
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Tensor> {
        let (r, c) = self.shape();
        for &i in idx {
            if i >= r {
                return Err(Error::Index {
                    op: "gather_rows",
                    index: i,
                    len: r,
                });
            }
        }
        let v = self.values();
        let mut out = Array2::zeros((idx.len(), c));
        for (k, &i) in idx.iter().enumerate() {
            out.row_mut(k).assign(&v.row(i));
        }
        drop(v);
        let idx = idx.to_vec();
        Ok(Tensor::from_op(
            out,
            vec![self.clone()],
            vec![Box::new(move |g| {
                let mut full = Array2::zeros((r, c));
                for (k, &i) in idx.iter().enumerate() {
                    let mut row = full.row_mut(i);
                    row += &g.row(k);
                }
                full
            })],
        ))
    }

    /// Mean over the row axis: `n x c -> 1 x c`.
    pub fn mean_rows(&self) -> Result<Tensor> {
        let (r, c) = self.shape();
        if r == 0 {
            return Err(Error::Config("mean_rows: empty input".into()));
        }
        let out = self
            .values()
            .mean_axis(Axis(0))
            .expect("nonempty")
            .insert_axis(Axis(0));
        let n = r as f64;
        Ok(Tensor::from_op(
            out,
            vec![self.clone()],
            vec![Box::new(move |g| {
                let mut full = Array2::zeros((r, c));
                for mut row in full.rows_mut() {
                    row.assign(&(g.row(0).to_owned() / n));
                }
                full
            })],
        ))
    }

    /// Sum of all entries as a `1 x 1` tensor.
    pub fn sum_all(&self) -> Tensor {
        let (r, c) = self.shape();
        let total = self.values().sum();
        Tensor::from_op(
            Array2::from_elem((1, 1), total),
            vec![self.clone()],
            vec![Box::new(move |g| Array2::from_elem((r, c), g[[0, 0]]))],
        )
    }

    // ---- nonlinearities ----

    pub fn tanh(&self) -> Tensor {
        let out = self.values().mapv(f64::tanh);
        let y = out.clone();
        Tensor::from_op(
            out,
            vec![self.clone()],
            vec![Box::new(move |g| g * &y.mapv(|v| 1.0 - v * v))],
        )
    }

    pub fn sigmoid(&self) -> Tensor {
        let out = self.values().mapv(|v| 1.0 / (1.0 + (-v).exp()));
        let y = out.clone();
        Tensor::from_op(
            out,
            vec![self.clone()],
            vec![Box::new(move |g| g * &y.mapv(|v| v * (1.0 - v)))],
        )
    }

    pub fn square(&self) -> Tensor {
        let out = self.values().mapv(|v| v * v);
        let a = self.clone();
        Tensor::from_op(
            out,
            vec![self.clone()],
            vec![Box::new(move |g| g * &a.values().mapv(|v| 2.0 * v))],
        )
    }

    pub fn sin(&self) -> Tensor {
        let out = self.values().mapv(f64::sin);
        let a = self.clone();
        Tensor::from_op(
            out,
            vec![self.clone()],
            vec![Box::new(move |g| g * &a.values().mapv(f64::cos))],
        )
    }

    pub fn cos(&self) -> Tensor {
        let out = self.values().mapv(f64::cos);
        let a = self.clone();
        Tensor::from_op(
            out,
            vec![self.clone()],
            vec![Box::new(move |g| g * &a.values().mapv(|v| -v.sin()))],
        )
    }

    /// Natural log. Callers clamp away from zero first (see `bce`).
    pub fn ln(&self) -> Tensor {
        let out = self.values().mapv(f64::ln);
        let a = self.clone();
        Tensor::from_op(
            out,
            vec![self.clone()],
            vec![Box::new(move |g| g / &*a.values())],
        )
    }

    pub fn leaky_relu(&self, slope: f64) -> Tensor {
        let out = self.values().mapv(|v| if v > 0.0 { v } else { slope * v });
        let a = self.clone();
        Tensor::from_op(
            out,
            vec![self.clone()],
            vec![Box::new(move |g| {
                g * &a.values().mapv(|v| if v > 0.0 { 1.0 } else { slope })
            })],
        )
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        let out = self.values().mapv(|v| v.clamp(lo, hi));
        let a = self.clone();
        Tensor::from_op(
            out,
            vec![self.clone()],
            vec![Box::new(move |g| {
                g * &a
                    .values()
                    .mapv(|v| if (lo..=hi).contains(&v) { 1.0 } else { 0.0 })
            })],
        )
    }

    /// Numerically stable softmax along each row.
    pub fn softmax_rows(&self) -> Tensor {
        let x = self.values();
        let mut y = x.clone();
        drop(x);
        for mut row in y.rows_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|v| (v - max).exp());
            let sum: f64 = row.sum();
            row.mapv_inplace(|v| v / sum);
        }
        let y_saved = y.clone();
        Tensor::from_op(
            y,
            vec![self.clone()],
            vec![Box::new(move |g| {
                let mut out = g.clone();
                for (i, mut orow) in out.rows_mut().into_iter().enumerate() {
                    let yr = y_saved.row(i);
                    let dot: f64 = orow.iter().zip(yr.iter()).map(|(a, b)| a * b).sum();
                    for (o, &yv) in orow.iter_mut().zip(yr.iter()) {
                        *o = yv * (*o - dot);
                    }
                }
                out
            })],
        )
    }
}

// ---- normalization layers ----

/// Running statistics for batch normalization. The affine parameters live
/// in ordinary trainable [`Tensor`]s next to this state.
pub struct BatchNormState {
    pub running_mean: RefCell<Array1<f64>>,
    pub running_var: RefCell<Array1<f64>>,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNormState {
    pub fn new(features: usize) -> Self {
        BatchNormState {
            running_mean: RefCell::new(Array1::zeros(features)),
            running_var: RefCell::new(Array1::ones(features)),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn features(&self) -> usize {
        self.running_mean.borrow().len()
    }
}

/// Batch normalization across the row (batch) axis of an `n x f` input.
///
/// `Train` and `Frozen` normalize with the statistics of the current batch;
/// only `Train` folds them into the running estimates (biased variance for
/// normalization, unbiased for the running estimate). `Eval` normalizes
/// with the running estimates.
pub fn batchnorm(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    state: &BatchNormState,
    phase: Phase,
) -> Result<Tensor> {
    let (n, f) = x.shape();
    if gamma.shape() != (1, f) {
        return Err(Error::shape("batchnorm", x.shape(), gamma.shape()));
    }
    if beta.shape() != (1, f) {
        return Err(Error::shape("batchnorm", x.shape(), beta.shape()));
    }
    if state.features() != f {
        return Err(Error::shape("batchnorm", (1, state.features()), (1, f)));
    }
    if n == 0 {
        return Err(Error::Config("batchnorm: empty batch".into()));
    }

    let batch_stats = phase != Phase::Eval;
    let (mean, var) = if batch_stats {
        let xv = x.values();
        let mean = xv.mean_axis(Axis(0)).expect("nonempty");
        let mut var = Array1::zeros(f);
        for row in xv.rows() {
            for (j, &v) in row.iter().enumerate() {
                let d = v - mean[j];
                var[j] += d * d;
            }
        }
        var /= n as f64;
        (mean, var)
    } else {
        (
            state.running_mean.borrow().clone(),
            state.running_var.borrow().clone(),
        )
    };

    if phase == Phase::Train {
        let m = state.momentum;
        let unbiased = if n > 1 {
            &var * (n as f64 / (n as f64 - 1.0))
        } else {
            var.clone()
        };
        let mut rm = state.running_mean.borrow_mut();
        let mut rv = state.running_var.borrow_mut();
        *rm = &*rm * (1.0 - m) + &mean * m;
        *rv = &*rv * (1.0 - m) + &unbiased * m;
    }

    let inv_std = (&var + state.eps).mapv(f64::sqrt).mapv(f64::recip);
    let xv = x.values();
    let mut xhat = Array2::zeros((n, f));
    for (i, row) in xv.rows().into_iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            xhat[[i, j]] = (v - mean[j]) * inv_std[j];
        }
    }
    drop(xv);
    let gv = gamma.values();
    let mut y = Array2::zeros((n, f));
    let bv = beta.values();
    for i in 0..n {
        for j in 0..f {
            y[[i, j]] = xhat[[i, j]] * gv[[0, j]] + bv[[0, j]];
        }
    }
    drop(gv);
    drop(bv);

    let xhat_x = xhat.clone();
    let gamma_x = gamma.clone();
    let inv_std_x = inv_std.clone();
    let xhat_g = xhat;
    Ok(Tensor::from_op(
        y,
        vec![x.clone(), gamma.clone(), beta.clone()],
        vec![
            Box::new(move |g| {
                let gv = gamma_x.values();
                let nf = n as f64;
                let mut dx = Array2::zeros((n, f));
                if batch_stats {
                    // Differentiate through the batch mean and variance.
                    for j in 0..f {
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for i in 0..n {
                            let dxhat = g[[i, j]] * gv[[0, j]];
                            s1 += dxhat;
                            s2 += dxhat * xhat_x[[i, j]];
                        }
                        for i in 0..n {
                            let dxhat = g[[i, j]] * gv[[0, j]];
                            dx[[i, j]] =
                                inv_std_x[j] / nf * (nf * dxhat - s1 - xhat_x[[i, j]] * s2);
                        }
                    }
                } else {
                    for i in 0..n {
                        for j in 0..f {
                            dx[[i, j]] = g[[i, j]] * gv[[0, j]] * inv_std_x[j];
                        }
                    }
                }
                dx
            }),
            Box::new(move |g| {
                let mut dgamma = Array2::zeros((1, f));
                for i in 0..n {
                    for j in 0..f {
                        dgamma[[0, j]] += g[[i, j]] * xhat_g[[i, j]];
                    }
                }
                dgamma
            }),
            Box::new(move |g| g.sum_axis(Axis(0)).insert_axis(Axis(0))),
        ],
    ))
}

/// Layer normalization along each row of an `n x f` input.
pub fn layernorm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let (n, f) = x.shape();
    if gamma.shape() != (1, f) || beta.shape() != (1, f) {
        return Err(Error::shape("layernorm", x.shape(), gamma.shape()));
    }
    if f == 0 {
        return Err(Error::Config("layernorm: zero features".into()));
    }

    let xv = x.values();
    let mut xhat = Array2::zeros((n, f));
    let mut inv_std = Array1::zeros(n);
    for (i, row) in xv.rows().into_iter().enumerate() {
        let mean: f64 = row.sum() / f as f64;
        let var: f64 = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / f as f64;
        let is = 1.0 / (var + eps).sqrt();
        inv_std[i] = is;
        for (j, &v) in row.iter().enumerate() {
            xhat[[i, j]] = (v - mean) * is;
        }
    }
    drop(xv);

    let gv = gamma.values();
    let bv = beta.values();
    let mut y = Array2::zeros((n, f));
    for i in 0..n {
        for j in 0..f {
            y[[i, j]] = xhat[[i, j]] * gv[[0, j]] + bv[[0, j]];
        }
    }
    drop(gv);
    drop(bv);

    let xhat_x = xhat.clone();
    let gamma_x = gamma.clone();
    let xhat_g = xhat;
    Ok(Tensor::from_op(
        y,
        vec![x.clone(), gamma.clone(), beta.clone()],
        vec![
            Box::new(move |g| {
                let gv = gamma_x.values();
                let ff = f as f64;
                let mut dx = Array2::zeros((n, f));
                for i in 0..n {
                    let mut s1 = 0.0;
                    let mut s2 = 0.0;
                    for j in 0..f {
                        let dxhat = g[[i, j]] * gv[[0, j]];
                        s1 += dxhat;
                        s2 += dxhat * xhat_x[[i, j]];
                    }
                    for j in 0..f {
                        let dxhat = g[[i, j]] * gv[[0, j]];
                        dx[[i, j]] = inv_std[i] / ff * (ff * dxhat - s1 - xhat_x[[i, j]] * s2);
                    }
                }
                dx
            }),
            Box::new(move |g| {
                let mut dgamma = Array2::zeros((1, f));
                for i in 0..n {
                    for j in 0..f {
                        dgamma[[0, j]] += g[[i, j]] * xhat_g[[i, j]];
                    }
                }
                dgamma
            }),
            Box::new(move |g| g.sum_axis(Axis(0)).insert_axis(Axis(0))),
        ],
    ))
}

/// Inverted dropout. Identity unless `phase == Train` and `rate > 0`.
pub fn dropout<R: Rng>(x: &Tensor, rate: f64, rng: &mut R, phase: Phase) -> Result<Tensor> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
    }
    if rate == 0.0 || phase != Phase::Train {
        return Ok(x.clone());
    }
    let keep = 1.0 - rate;
    let (r, c) = x.shape();
    let mask = Array2::from_shape_fn((r, c), |_| {
        if rng.gen::<f64>() < keep {
            1.0 / keep
        } else {
            0.0
        }
    });
    let out = &*x.values() * &mask;
    Ok(Tensor::from_op(
        out,
        vec![x.clone()],
        vec![Box::new(move |g| g * &mask)],
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn randn(rng: &mut ChaCha20Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.gen_range(-1.0..1.0))
    }

    /// Central finite differences on every entry of every param, against a
    /// scalar-valued graph builder. Weighted sum output so gradients are
    /// non-uniform.
    fn check_grads<F>(build: F, params: &[Tensor], h: f64, tol: f64)
    where
        F: Fn() -> Tensor,
    {
        for p in params {
            p.zero_grad();
        }
        let loss = build();
        assert_eq!(loss.shape(), (1, 1));
        loss.backward();
        let grads: Vec<Array2<f64>> = params.iter().map(|p| p.grad_or_zeros()).collect();
        for (pi, p) in params.iter().enumerate() {
            let (r, c) = p.shape();
            for i in 0..r {
                for j in 0..c {
                    p.nudge(i, j, h);
                    let up = build().item();
                    p.nudge(i, j, -2.0 * h);
                    let down = build().item();
                    p.nudge(i, j, h);
                    let fd = (up - down) / (2.0 * h);
                    let ad = grads[pi][[i, j]];
                    let denom = ad.abs().max(fd.abs()).max(1e-6);
                    let rel = (ad - fd).abs() / denom;
                    assert!(
                        rel < tol,
                        "param {pi} entry ({i},{j}): ad={ad:.12e} fd={fd:.12e} rel={rel:.3e}"
                    );
                }
            }
        }
    }

    #[test]
    fn add_backward_accumulates_both_sides() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let a = Tensor::param(randn(&mut rng, 3, 4));
        let b = Tensor::param(randn(&mut rng, 3, 4));
        let mut wrng = ChaCha20Rng::seed_from_u64(2);
        let w = Tensor::constant(randn(&mut wrng, 3, 4));
        check_grads(
            || a.add(&b).unwrap().mul(&w).unwrap().sum_all(),
            &[a.clone(), b.clone()],
            1e-5,
            1e-8,
        );
    }

    #[test]
    fn matmul_gradients_match_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let a = Tensor::param(randn(&mut rng, 3, 5));
        let b = Tensor::param(randn(&mut rng, 5, 2));
        let w = Tensor::constant(randn(&mut rng, 3, 2));
        check_grads(
            || a.matmul(&b).unwrap().mul(&w).unwrap().sum_all(),
            &[a.clone(), b.clone()],
            1e-5,
            1e-6,
        );
    }

    #[test]
    fn matmul_shape_mismatch_is_an_error() {
        let a = Tensor::constant(Array2::zeros((2, 3)));
        let b = Tensor::constant(Array2::zeros((4, 2)));
        match a.matmul(&b) {
            Err(Error::Shape { op, .. }) => assert_eq!(op, "matmul"),
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn elementwise_ops_match_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let x = Tensor::param(randn(&mut rng, 2, 6).mapv(|v| v * 0.8 + 1.5)); // positive, away from kinks
        let mut wrng = ChaCha20Rng::seed_from_u64(5);

        let w = Tensor::constant(randn(&mut wrng, 2, 6));
        for op in [
            |t: &Tensor| t.tanh(),
            |t: &Tensor| t.sigmoid(),
            |t: &Tensor| t.square(),
            |t: &Tensor| t.sin(),
            |t: &Tensor| t.cos(),
            |t: &Tensor| t.ln(),
            |t: &Tensor| t.leaky_relu(0.01),
            |t: &Tensor| t.affine(2.5, -0.3),
            |t: &Tensor| t.clamp(0.2, 4.0),
        ] {
            let xc = x.clone();
            let wc = w.clone();
            check_grads(
                move || op(&xc).mul(&wc).unwrap().sum_all(),
                &[x.clone()],
                1e-6,
                1e-5,
            );
        }
    }

    #[test]
    fn leaky_relu_negative_branch_uses_slope() {
        let x = Tensor::param(Array2::from_shape_vec((1, 2), vec![-2.0, 3.0]).unwrap());
        let y = x.leaky_relu(0.01);
        assert_eq!(y.value_at(0, 0), -0.02);
        assert_eq!(y.value_at(0, 1), 3.0);
        y.sum_all().backward();
        let g = x.grad().unwrap();
        assert_eq!(g[[0, 0]], 0.01);
        assert_eq!(g[[0, 1]], 1.0);
    }

    #[test]
    fn softmax_of_log_three_and_zero_is_three_quarters() {
        let x = Tensor::row(&[3f64.ln(), 0.0]);
        let y = x.softmax_rows();
        assert!((y.value_at(0, 0) - 0.75).abs() < 1e-12);
        assert!((y.value_at(0, 1) - 0.25).abs() < 1e-12);
    }

    #[test]
    fn softmax_gradients_match_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let x = Tensor::param(randn(&mut rng, 3, 5));
        let w = Tensor::constant(randn(&mut rng, 3, 5));
        check_grads(
            || x.softmax_rows().mul(&w).unwrap().sum_all(),
            &[x.clone()],
            1e-6,
            1e-6,
        );
    }

    #[test]
    fn shape_ops_match_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let a = Tensor::param(randn(&mut rng, 3, 4));
        let b = Tensor::param(randn(&mut rng, 2, 4));
        let mut wrng = ChaCha20Rng::seed_from_u64(8);

        // concat_rows + slice_cols + transpose + gather with a duplicate.
        let w = Tensor::constant(randn(&mut wrng, 3, 5));
        let a2 = a.clone();
        let b2 = b.clone();
        check_grads(
            move || {
                let cat = Tensor::concat_rows(&[a2.clone(), b2.clone()]).unwrap();
                let picked = cat.gather_rows(&[0, 4, 0]).unwrap(); // row 0 twice
                let sliced = picked.slice_cols(1, 3).unwrap();
                let t = sliced.transpose(); // 3 x 3
                let m = t.mean_rows().unwrap(); // 1 x 3
                let row = m.gather_rows(&[0, 0, 0]).unwrap(); // 3 x 3 via duplication
                Tensor::concat_cols(&[row.clone(), row.clone().slice_cols(0, 2).unwrap()])
                    .unwrap()
                    .mul(&w)
                    .unwrap()
                    .sum_all()
            },
            &[a.clone(), b.clone()],
            1e-6,
            1e-6,
        );
    }

    #[test]
    fn bias_and_scalar_ops_match_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let x = Tensor::param(randn(&mut rng, 4, 3));
        let bias = Tensor::param(randn(&mut rng, 1, 3));
        let s = Tensor::param(randn(&mut rng, 1, 1));
        let w = Tensor::constant(randn(&mut rng, 4, 3));
        let (xc, bc, sc, wc) = (x.clone(), bias.clone(), s.clone(), w.clone());
        check_grads(
            move || {
                xc.add_bias_rows(&bc)
                    .unwrap()
                    .scale_by(&sc)
                    .unwrap()
                    .mul(&wc)
                    .unwrap()
                    .sum_all()
            },
            &[x, bias, s],
            1e-6,
            1e-6,
        );
    }

    #[test]
    fn fan_out_sums_gradient_contributions() {
        // y = x * x consumed twice: dy/dx via two paths must sum.
        let x = Tensor::param(Array2::from_elem((1, 1), 3.0));
        let y = x.add(&x).unwrap(); // 2x
        let z = y.mul(&x).unwrap(); // 2x^2
        z.sum_all().backward();
        let g = x.grad().unwrap();
        assert!((g[[0, 0]] - 12.0).abs() < 1e-12); // d(2x^2)/dx = 4x = 12
    }

    #[test]
    fn batchnorm_train_matches_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(10);
        let x = Tensor::param(randn(&mut rng, 5, 3));
        let gamma = Tensor::param(randn(&mut rng, 1, 3).mapv(|v| v + 1.5));
        let beta = Tensor::param(randn(&mut rng, 1, 3));
        let w = Tensor::constant(randn(&mut rng, 5, 3));
        let state = BatchNormState::new(3);
        let (xc, gc, bc, wc) = (x.clone(), gamma.clone(), beta.clone(), w.clone());
        check_grads(
            move || {
                batchnorm(&xc, &gc, &bc, &state, Phase::Frozen)
                    .unwrap()
                    .mul(&wc)
                    .unwrap()
                    .sum_all()
            },
            &[x, gamma, beta],
            1e-6,
            1e-5,
        );
    }

    #[test]
    fn batchnorm_eval_uses_running_statistics() {
        let state = BatchNormState::new(2);
        *state.running_mean.borrow_mut() = Array1::from_vec(vec![1.0, -1.0]);
        *state.running_var.borrow_mut() = Array1::from_vec(vec![4.0, 1.0]);
        let x = Tensor::constant(Array2::from_shape_vec((1, 2), vec![3.0, 0.0]).unwrap());
        let gamma = Tensor::param(Array2::ones((1, 2)));
        let beta = Tensor::param(Array2::zeros((1, 2)));
        let y = batchnorm(&x, &gamma, &beta, &state, Phase::Eval).unwrap();
        // (3 - 1) / sqrt(4 + 1e-5) and (0 + 1) / sqrt(1 + 1e-5)
        assert!((y.value_at(0, 0) - 2.0 / (4.0f64 + 1e-5).sqrt()).abs() < 1e-12);
        assert!((y.value_at(0, 1) - 1.0 / (1.0f64 + 1e-5).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn batchnorm_frozen_leaves_running_statistics_alone() {
        let state = BatchNormState::new(2);
        let x = Tensor::constant(Array2::from_shape_vec((2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let gamma = Tensor::param(Array2::ones((1, 2)));
        let beta = Tensor::param(Array2::zeros((1, 2)));
        let before = state.running_mean.borrow().clone();
        batchnorm(&x, &gamma, &beta, &state, Phase::Frozen).unwrap();
        assert_eq!(*state.running_mean.borrow(), before);
        batchnorm(&x, &gamma, &beta, &state, Phase::Train).unwrap();
        assert_ne!(*state.running_mean.borrow(), before);
    }

    #[test]
    fn layernorm_matches_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let x = Tensor::param(randn(&mut rng, 4, 6));
        let gamma = Tensor::param(randn(&mut rng, 1, 6).mapv(|v| v + 1.2));
        let beta = Tensor::param(randn(&mut rng, 1, 6));
        let w = Tensor::constant(randn(&mut rng, 4, 6));
        let (xc, gc, bc, wc) = (x.clone(), gamma.clone(), beta.clone(), w.clone());
        check_grads(
            move || {
                layernorm(&xc, &gc, &bc, 1e-5)
                    .unwrap()
                    .mul(&wc)
                    .unwrap()
                    .sum_all()
            },
            &[x, gamma, beta],
            1e-6,
            1e-5,
        );
    }

    #[test]
    fn dropout_is_identity_at_rate_zero_and_in_eval() {
        let mut rng = ChaCha20Rng::seed_from_u64(12);
        let x = Tensor::param(randn(&mut rng, 3, 3));
        let y = dropout(&x, 0.0, &mut rng, Phase::Train).unwrap();
        assert_eq!(y.id(), x.id());
        let y = dropout(&x, 0.5, &mut rng, Phase::Eval).unwrap();
        assert_eq!(y.id(), x.id());
    }

    #[test]
    fn dropout_mask_scales_surviving_entries_and_gradient() {
        let x = Tensor::param(Array2::ones((1, 1000)));
        let mut rng = ChaCha20Rng::seed_from_u64(13);
        let y = dropout(&x, 0.25, &mut rng, Phase::Train).unwrap();
        let kept = y.values().iter().filter(|&&v| v > 0.0).count();
        // Survivors are scaled by 1 / 0.75.
        assert!(y.values().iter().all(|&v| v == 0.0 || (v - 4.0 / 3.0).abs() < 1e-12));
        assert!((650..=850).contains(&kept), "kept {kept} of 1000");
        y.sum_all().backward();
        let g = x.grad().unwrap();
        let nonzero = g.iter().filter(|&&v| v > 0.0).count();
        assert_eq!(nonzero, kept);
    }

    #[test]
    fn mean_rows_divides_gradient_evenly() {
        let x = Tensor::param(Array2::from_shape_vec((2, 2), vec![2.0, 0.0, 0.0, 2.0]).unwrap());
        let m = x.mean_rows().unwrap();
        assert_eq!(m.value_at(0, 0), 1.0);
        assert_eq!(m.value_at(0, 1), 1.0);
        m.sum_all().backward();
        let g = x.grad().unwrap();
        assert!(g.iter().all(|&v| (v - 0.5).abs() < 1e-15));
    }

    #[test]
    fn backward_frees_intermediate_gradients_but_keeps_leaves() {
        let x = Tensor::param(Array2::ones((2, 2)));
        let mid = x.scale(2.0);
        let loss = mid.sum_all();
        loss.backward();
        assert!(x.grad().is_some());
        assert!(mid.grad().is_none());
    }
}
