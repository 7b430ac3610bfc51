//! Dense tensor arithmetic with reverse-mode automatic differentiation.
//!
//! Tensors are flat row-major `f64` buffers with an explicit shape vector.
//! Every operation computes its value eagerly; when any operand has gradient
//! tracking enabled the operation also records itself on the implicit graph,
//! and [`Tensor::backward`] replays the graph in reverse topological order,
//! accumulating gradients into every tracked leaf.
//!
//! The op set is exactly what the encoder, adapters, classifier, and losses
//! need: matrix products, elementwise arithmetic, ReLU, layer normalization,
//! row softmax, scaled dot-product attention, axis means, L1 norm, and fused
//! softmax cross-entropy. Attention and the class-token plumbing operate on
//! batches stacked along rows: a batch of `b` sequences of `t` tokens lives
//! in a `(b*t) x d` matrix, instance `i` occupying rows `i*t..(i+1)*t`.
//!
//! Operations snapshot the operand values they need for their gradient, so
//! in-place weight updates after backward never corrupt a later graph. Both
//! the backward pass and graph teardown are iterative, so graph depth is
//! bounded by memory, not the call stack. Graph construction and backward
//! are single-threaded. Shape violations and non-finite operands abort with
//! a diagnostic naming the offending shapes; they are bugs in the caller,
//! not recoverable conditions.

pub mod optim;

use std::cell::RefCell;
use std::rc::Rc;
use std::sync::atomic::{AtomicUsize, Ordering};

static NEXT_ID: AtomicUsize = AtomicUsize::new(0);

type BackwardFn = Box<dyn Fn(&[f64], &[Tensor])>;

struct GradFn {
    parents: Vec<Tensor>,
    backward: BackwardFn,
}

struct Inner {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
    grad_fn: Option<GradFn>,
    id: usize,
}

impl Drop for Inner {
    // Dismantle the parent graph iteratively. A naive drop would recurse
    // through the whole chain of grad_fn parents and overflow the stack on
    // deep graphs.
    fn drop(&mut self) {
        let mut stack: Vec<Tensor> = Vec::new();
        if let Some(gf) = self.grad_fn.take() {
            stack.extend(gf.parents);
        }
        while let Some(Tensor { inner }) = stack.pop() {
            if let Ok(cell) = Rc::try_unwrap(inner) {
                let mut dead = cell.into_inner();
                if let Some(gf) = dead.grad_fn.take() {
                    stack.extend(gf.parents);
                }
            }
        }
    }
}

/// Shared handle to a tensor node. Cloning the handle shares storage.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<RefCell<Inner>>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn from_shape_vec(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            numel(&shape),
            data.len(),
            "tensor construction: shape {:?} implies {} elements, got {}",
            shape,
            numel(&shape),
            data.len()
        );
        Tensor {
            inner: Rc::new(RefCell::new(Inner {
                shape,
                data,
                requires_grad: false,
                grad: None,
                grad_fn: None,
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            })),
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = numel(&shape);
        Tensor::from_shape_vec(shape, vec![0.0; n])
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::from_shape_vec(vec![1], vec![v])
    }

    pub fn vector(data: Vec<f64>) -> Self {
        let n = data.len();
        Tensor::from_shape_vec(vec![n], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        Tensor::from_shape_vec(vec![rows, cols], data)
    }

    /// Fresh tensor of iid N(0, std^2) entries.
    pub fn gaussian(shape: Vec<usize>, std: f64, rng: &mut crate::rng::Rng) -> Self {
        let n = numel(&shape);
        Tensor::from_shape_vec(shape, rng.normal_vec(n, std))
    }

    /// Enable gradient tracking on this leaf and return the handle.
    pub fn with_grad(self) -> Self {
        self.inner.borrow_mut().requires_grad = true;
        self
    }

    pub fn set_requires_grad(&self, on: bool) {
        self.inner.borrow_mut().requires_grad = on;
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.borrow().requires_grad
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().shape.clone()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn rows(&self) -> usize {
        let inner = self.inner.borrow();
        assert_eq!(inner.shape.len(), 2, "rows(): tensor is not 2-d: {:?}", inner.shape);
        inner.shape[0]
    }

    pub fn cols(&self) -> usize {
        let inner = self.inner.borrow();
        assert_eq!(inner.shape.len(), 2, "cols(): tensor is not 2-d: {:?}", inner.shape);
        inner.shape[1]
    }

    pub fn data_vec(&self) -> Vec<f64> {
        self.inner.borrow().data.clone()
    }

    /// Copy with the same data and no graph history or tracking.
    pub fn detached_copy(&self) -> Tensor {
        let inner = self.inner.borrow();
        Tensor::from_shape_vec(inner.shape.clone(), inner.data.clone())
    }

    pub fn item(&self) -> f64 {
        let inner = self.inner.borrow();
        assert_eq!(inner.data.len(), 1, "item(): tensor of shape {:?} is not scalar", inner.shape);
        inner.data[0]
    }

    pub fn grad_vec(&self) -> Option<Vec<f64>> {
        self.inner.borrow().grad.clone()
    }

    /// Gradient of the last backward pass, zeros if this leaf was not reached.
    pub fn grad_or_zeros(&self) -> Vec<f64> {
        let inner = self.inner.borrow();
        inner.grad.clone().unwrap_or_else(|| vec![0.0; inner.data.len()])
    }

    /// Remove and return the accumulated gradient.
    pub fn take_grad(&self) -> Option<Vec<f64>> {
        self.inner.borrow_mut().grad.take()
    }

    /// Mutate the raw data in place.
    pub fn update_data(&self, f: impl FnOnce(&mut [f64])) {
        f(&mut self.inner.borrow_mut().data);
    }

    pub fn all_finite(&self) -> bool {
        self.inner.borrow().data.iter().all(|x| x.is_finite())
    }

    fn id(&self) -> usize {
        self.inner.borrow().id
    }

    fn from_op(shape: Vec<usize>, data: Vec<f64>, parents: Vec<Tensor>, backward: BackwardFn) -> Tensor {
        let tracked = parents.iter().any(|p| p.requires_grad());
        let out = Tensor::from_shape_vec(shape, data);
        if tracked {
            let mut inner = out.inner.borrow_mut();
            inner.requires_grad = true;
            inner.grad_fn = Some(GradFn { parents, backward });
        }
        out
    }

    fn accumulate_grad(&self, delta: &[f64]) {
        let mut inner = self.inner.borrow_mut();
        if !inner.requires_grad {
            return;
        }
        let n = inner.data.len();
        let grad = inner.grad.get_or_insert_with(|| vec![0.0; n]);
        for (g, d) in grad.iter_mut().zip(delta) {
            *g += d;
        }
    }

    /// Reverse-mode backward pass from a scalar loss. Accumulates gradients
    /// into every tracked tensor the loss depends on.
    pub fn backward(&self) {
        {
            let inner = self.inner.borrow();
            assert_eq!(
                inner.data.len(),
                1,
                "backward: loss must be scalar, got shape {:?}",
                inner.shape
            );
        }
        self.accumulate_grad(&[1.0]);

        // Iterative post-order DFS over tracked parents; reversed, children
        // run before parents so each node's gradient is complete when its
        // rule fires.
        let mut order: Vec<Tensor> = Vec::new();
        let mut visited: std::collections::HashSet<usize> = std::collections::HashSet::new();
        let mut stack: Vec<(Tensor, usize)> = Vec::new();
        if self.requires_grad() {
            visited.insert(self.id());
            stack.push((self.clone(), 0));
        }
        while let Some((node, pi)) = stack.pop() {
            let next_parent = {
                let inner = node.inner.borrow();
                inner.grad_fn.as_ref().and_then(|gf| {
                    gf.parents
                        .iter()
                        .skip(pi)
                        .enumerate()
                        .find(|(_, p)| p.requires_grad() && !visited.contains(&p.id()))
                        .map(|(off, p)| (pi + off + 1, p.clone()))
                })
            };
            match next_parent {
                Some((resume, parent)) => {
                    visited.insert(parent.id());
                    stack.push((node, resume));
                    stack.push((parent, 0));
                }
                None => order.push(node),
            }
        }

        for node in order.iter().rev() {
            let inner = node.inner.borrow();
            if let Some(gf) = &inner.grad_fn {
                let grad = inner
                    .grad
                    .as_ref()
                    .expect("backward: interior node visited without gradient")
                    .clone();
                (gf.backward)(&grad, &gf.parents);
            }
        }
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let inner = self.inner.borrow();
        f.debug_struct("Tensor")
            .field("shape", &inner.shape)
            .field("requires_grad", &inner.requires_grad)
            .field("data", &inner.data)
            .finish()
    }
}

fn check_finite(op: &str, t: &Tensor) {
    assert!(
        t.all_finite(),
        "{op}: non-finite input (shape {:?})",
        t.shape()
    );
}

// ── raw matrix kernels ───────────────────────────────────────────────

/// c[m x n] = a[m x k] @ b[k x n]
pub(crate) fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for j in 0..n {
                c_row[j] += aip * b_row[j];
            }
        }
    }
    c
}

/// c[m x n] = a[m x k] @ b[n x k]^T
fn mm_bt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for p in 0..k {
                s += a_row[p] * b_row[p];
            }
            c[i * n + j] = s;
        }
    }
    c
}

/// c[m x n] = a[k x m]^T @ b[k x n]
fn mm_at(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for p in 0..k {
        let a_row = &a[p * m..(p + 1) * m];
        let b_row = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let api = a_row[i];
            if api == 0.0 {
                continue;
            }
            let c_row = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                c_row[j] += api * b_row[j];
            }
        }
    }
    c
}

pub(crate) fn softmax_row_into(row: &[f64], out: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        let e = (x - m).exp();
        *o = e;
        z += e;
    }
    for o in out.iter_mut() {
        *o /= z;
    }
}

// ── operations ───────────────────────────────────────────────────────

impl Tensor {
    /// Elementwise sum; shapes must match exactly.
    pub fn add(&self, other: &Tensor) -> Tensor {
        binary_elementwise("add", self, other, |a, b| a + b, |g| (g.to_vec(), g.to_vec()))
    }

    /// Elementwise difference.
    pub fn sub(&self, other: &Tensor) -> Tensor {
        binary_elementwise(
            "sub",
            self,
            other,
            |a, b| a - b,
            |g| (g.to_vec(), g.iter().map(|x| -x).collect()),
        )
    }

    /// Hadamard product.
    pub fn mul(&self, other: &Tensor) -> Tensor {
        check_finite("mul", self);
        check_finite("mul", other);
        let (sa, sb) = (self.shape(), other.shape());
        assert_eq!(sa, sb, "mul shape mismatch: lhs {:?} rhs {:?}", sa, sb);
        let a = self.data_vec();
        let b = other.data_vec();
        let data: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x * y).collect();
        Tensor::from_op(
            sa,
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |g, parents| {
                let da: Vec<f64> = g.iter().zip(&b).map(|(gi, bi)| gi * bi).collect();
                let db: Vec<f64> = g.iter().zip(&a).map(|(gi, ai)| gi * ai).collect();
                parents[0].accumulate_grad(&da);
                parents[1].accumulate_grad(&db);
            }),
        )
    }

    /// Multiply every entry by a constant.
    pub fn scale(&self, c: f64) -> Tensor {
        check_finite("scale", self);
        assert!(c.is_finite(), "scale: non-finite factor {c}");
        let data: Vec<f64> = self.data_vec().iter().map(|x| x * c).collect();
        Tensor::from_op(
            self.shape(),
            data,
            vec![self.clone()],
            Box::new(move |g, parents| {
                let d: Vec<f64> = g.iter().map(|x| x * c).collect();
                parents[0].accumulate_grad(&d);
            }),
        )
    }

    /// Rectified linear unit; the subgradient at zero is zero.
    pub fn relu(&self) -> Tensor {
        check_finite("relu", self);
        let a = self.data_vec();
        let data: Vec<f64> = a.iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        Tensor::from_op(
            self.shape(),
            data,
            vec![self.clone()],
            Box::new(move |g, parents| {
                let d: Vec<f64> = g
                    .iter()
                    .zip(&a)
                    .map(|(gi, &ai)| if ai > 0.0 { *gi } else { 0.0 })
                    .collect();
                parents[0].accumulate_grad(&d);
            }),
        )
    }

    /// `self[m x k] @ other[k x n]`.
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        check_finite("matmul", self);
        check_finite("matmul", other);
        let (sa, sb) = (self.shape(), other.shape());
        assert!(
            sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0],
            "matmul shape mismatch: lhs {:?} rhs {:?}",
            sa,
            sb
        );
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let a = self.data_vec();
        let b = other.data_vec();
        let data = mm(&a, &b, m, k, n);
        Tensor::from_op(
            vec![m, n],
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |g, parents| {
                if parents[0].requires_grad() {
                    parents[0].accumulate_grad(&mm_bt(g, &b, m, n, k));
                }
                if parents[1].requires_grad() {
                    parents[1].accumulate_grad(&mm_at(&a, g, k, m, n));
                }
            }),
        )
    }

    /// `self[m x k] @ other[n x k]^T`.
    pub fn matmul_bt(&self, other: &Tensor) -> Tensor {
        check_finite("matmul_bt", self);
        check_finite("matmul_bt", other);
        let (sa, sb) = (self.shape(), other.shape());
        assert!(
            sa.len() == 2 && sb.len() == 2 && sa[1] == sb[1],
            "matmul_bt shape mismatch: lhs {:?} rhs {:?}",
            sa,
            sb
        );
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let a = self.data_vec();
        let b = other.data_vec();
        let data = mm_bt(&a, &b, m, k, n);
        Tensor::from_op(
            vec![m, n],
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |g, parents| {
                if parents[0].requires_grad() {
                    parents[0].accumulate_grad(&mm(g, &b, m, n, k));
                }
                if parents[1].requires_grad() {
                    parents[1].accumulate_grad(&mm_at(g, &a, n, m, k));
                }
            }),
        )
    }

    /// Row-wise layer normalization over the last axis with affine rescale.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Tensor {
        check_finite("layer_norm", self);
        check_finite("layer_norm", gamma);
        check_finite("layer_norm", beta);
        let s = self.shape();
        assert_eq!(s.len(), 2, "layer_norm: input must be 2-d, got {:?}", s);
        let (n, d) = (s[0], s[1]);
        assert!(
            gamma.shape() == vec![d] && beta.shape() == vec![d],
            "layer_norm shape mismatch: input {:?} gamma {:?} beta {:?}",
            s,
            gamma.shape(),
            beta.shape()
        );
        let x = self.data_vec();
        let gm = gamma.data_vec();
        let bt = beta.data_vec();
        let mut out = vec![0.0; n * d];
        let mut xhat = vec![0.0; n * d];
        let mut inv_std = vec![0.0; n];
        for i in 0..n {
            let row = &x[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let istd = 1.0 / (var + eps).sqrt();
            inv_std[i] = istd;
            for j in 0..d {
                let h = (row[j] - mean) * istd;
                xhat[i * d + j] = h;
                out[i * d + j] = gm[j] * h + bt[j];
            }
        }
        Tensor::from_op(
            vec![n, d],
            out,
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(move |g, parents| {
                if parents[1].requires_grad() {
                    let mut dg = vec![0.0; d];
                    for i in 0..n {
                        for j in 0..d {
                            dg[j] += g[i * d + j] * xhat[i * d + j];
                        }
                    }
                    parents[1].accumulate_grad(&dg);
                }
                if parents[2].requires_grad() {
                    let mut db = vec![0.0; d];
                    for i in 0..n {
                        for j in 0..d {
                            db[j] += g[i * d + j];
                        }
                    }
                    parents[2].accumulate_grad(&db);
                }
                if parents[0].requires_grad() {
                    let mut dx = vec![0.0; n * d];
                    for i in 0..n {
                        let gr = &g[i * d..(i + 1) * d];
                        let hr = &xhat[i * d..(i + 1) * d];
                        let mut sum_gg = 0.0;
                        let mut sum_gh = 0.0;
                        for j in 0..d {
                            let gg = gr[j] * gm[j];
                            sum_gg += gg;
                            sum_gh += gg * hr[j];
                        }
                        let m1 = sum_gg / d as f64;
                        let m2 = sum_gh / d as f64;
                        for j in 0..d {
                            let gg = gr[j] * gm[j];
                            dx[i * d + j] = (gg - m1 - hr[j] * m2) * inv_std[i];
                        }
                    }
                    parents[0].accumulate_grad(&dx);
                }
            }),
        )
    }

    /// Numerically stable softmax over each row.
    pub fn softmax_rows(&self) -> Tensor {
        check_finite("softmax", self);
        let s = self.shape();
        assert_eq!(s.len(), 2, "softmax: input must be 2-d, got {:?}", s);
        let (n, k) = (s[0], s[1]);
        let x = self.data_vec();
        let mut y = vec![0.0; n * k];
        for i in 0..n {
            softmax_row_into(&x[i * k..(i + 1) * k], &mut y[i * k..(i + 1) * k]);
        }
        let saved = y.clone();
        Tensor::from_op(
            vec![n, k],
            y,
            vec![self.clone()],
            Box::new(move |g, parents| {
                let mut dx = vec![0.0; n * k];
                for i in 0..n {
                    let yr = &saved[i * k..(i + 1) * k];
                    let gr = &g[i * k..(i + 1) * k];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..k {
                        dx[i * k + j] = yr[j] * (gr[j] - dot);
                    }
                }
                parents[0].accumulate_grad(&dx);
            }),
        )
    }

    /// Mean across one axis of a 2-d tensor; the result is 1-d.
    pub fn mean_axis(&self, axis: usize) -> Tensor {
        check_finite("mean_axis", self);
        let s = self.shape();
        assert_eq!(s.len(), 2, "mean_axis: input must be 2-d, got {:?}", s);
        assert!(axis < 2, "mean_axis: axis {axis} out of range for {:?}", s);
        let (n, d) = (s[0], s[1]);
        let x = self.data_vec();
        if axis == 0 {
            let mut out = vec![0.0; d];
            for i in 0..n {
                for j in 0..d {
                    out[j] += x[i * d + j];
                }
            }
            for o in out.iter_mut() {
                *o /= n as f64;
            }
            Tensor::from_op(
                vec![d],
                out,
                vec![self.clone()],
                Box::new(move |g, parents| {
                    let mut dx = vec![0.0; n * d];
                    for i in 0..n {
                        for j in 0..d {
                            dx[i * d + j] = g[j] / n as f64;
                        }
                    }
                    parents[0].accumulate_grad(&dx);
                }),
            )
        } else {
            let mut out = vec![0.0; n];
            for i in 0..n {
                out[i] = x[i * d..(i + 1) * d].iter().sum::<f64>() / d as f64;
            }
            Tensor::from_op(
                vec![n],
                out,
                vec![self.clone()],
                Box::new(move |g, parents| {
                    let mut dx = vec![0.0; n * d];
                    for i in 0..n {
                        for j in 0..d {
                            dx[i * d + j] = g[i] / d as f64;
                        }
                    }
                    parents[0].accumulate_grad(&dx);
                }),
            )
        }
    }

    /// Sum of every entry, as a scalar tensor.
    pub fn sum_all(&self) -> Tensor {
        check_finite("sum_all", self);
        let total: f64 = self.data_vec().iter().sum();
        let n = self.len();
        Tensor::from_op(
            vec![1],
            vec![total],
            vec![self.clone()],
            Box::new(move |g, parents| {
                parents[0].accumulate_grad(&vec![g[0]; n]);
            }),
        )
    }

    /// Entrywise L1 norm (sum of absolute values), as a scalar tensor.
    /// The subgradient at exact zeros is zero.
    pub fn l1_norm(&self) -> Tensor {
        check_finite("l1_norm", self);
        let a = self.data_vec();
        let total: f64 = a.iter().map(|x| x.abs()).sum();
        Tensor::from_op(
            vec![1],
            vec![total],
            vec![self.clone()],
            Box::new(move |g, parents| {
                let d: Vec<f64> = a
                    .iter()
                    .map(|&x| {
                        if x > 0.0 {
                            g[0]
                        } else if x < 0.0 {
                            -g[0]
                        } else {
                            0.0
                        }
                    })
                    .collect();
                parents[0].accumulate_grad(&d);
            }),
        )
    }

    /// Broadcast-add a length-d bias vector to every row of an `n x d` matrix.
    pub fn add_bias(&self, bias: &Tensor) -> Tensor {
        check_finite("add_bias", self);
        check_finite("add_bias", bias);
        let s = self.shape();
        assert_eq!(s.len(), 2, "add_bias: input must be 2-d, got {:?}", s);
        let (n, d) = (s[0], s[1]);
        assert_eq!(
            bias.shape(),
            vec![d],
            "add_bias shape mismatch: input {:?} bias {:?}",
            s,
            bias.shape()
        );
        let x = self.data_vec();
        let b = bias.data_vec();
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            for j in 0..d {
                out[i * d + j] = x[i * d + j] + b[j];
            }
        }
        Tensor::from_op(
            vec![n, d],
            out,
            vec![self.clone(), bias.clone()],
            Box::new(move |g, parents| {
                parents[0].accumulate_grad(g);
                if parents[1].requires_grad() {
                    let mut db = vec![0.0; d];
                    for i in 0..n {
                        for j in 0..d {
                            db[j] += g[i * d + j];
                        }
                    }
                    parents[1].accumulate_grad(&db);
                }
            }),
        )
    }

    /// Mean softmax cross-entropy with integer class labels, natural log.
    ///
    /// Fused with the softmax for stability: per row the loss is
    /// `logsumexp(row) - row[label]`, and the gradient is
    /// `(softmax(row) - onehot(label)) / n`.
    pub fn cross_entropy_mean(&self, labels: &[usize]) -> Tensor {
        check_finite("cross_entropy", self);
        let s = self.shape();
        assert_eq!(s.len(), 2, "cross_entropy: logits must be 2-d, got {:?}", s);
        let (n, k) = (s[0], s[1]);
        assert!(n > 0, "cross_entropy: empty batch");
        assert_eq!(
            labels.len(),
            n,
            "cross_entropy: {} logit rows but {} labels",
            n,
            labels.len()
        );
        for (i, &y) in labels.iter().enumerate() {
            assert!(y < k, "cross_entropy: label {y} at row {i} out of range for {k} classes");
        }
        let x = self.data_vec();
        let mut probs = vec![0.0; n * k];
        let mut total = 0.0;
        for i in 0..n {
            let row = &x[i * k..(i + 1) * k];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|&v| (v - m).exp()).sum();
            let lse = m + z.ln();
            total += lse - row[labels[i]];
            for j in 0..k {
                probs[i * k + j] = (row[j] - m).exp() / z;
            }
        }
        let loss = total / n as f64;
        let labels = labels.to_vec();
        Tensor::from_op(
            vec![1],
            vec![loss],
            vec![self.clone()],
            Box::new(move |g, parents| {
                let mut dx = vec![0.0; n * k];
                for i in 0..n {
                    for j in 0..k {
                        let onehot = if j == labels[i] { 1.0 } else { 0.0 };
                        dx[i * k + j] = g[0] * (probs[i * k + j] - onehot) / n as f64;
                    }
                }
                parents[0].accumulate_grad(&dx);
            }),
        )
    }

    /// Multi-head scaled dot-product attention over a row-stacked batch.
    ///
    /// `q`, `k`, `v` are `(batch*seq) x d` with `d % heads == 0`; attention is
    /// computed independently per instance and per head at scale
    /// `1/sqrt(d/heads)`, and head outputs are re-interleaved into the same
    /// `(batch*seq) x d` layout.
    pub fn scaled_dot_attention(q: &Tensor, k: &Tensor, v: &Tensor, batch: usize, heads: usize) -> Tensor {
        check_finite("attention", q);
        check_finite("attention", k);
        check_finite("attention", v);
        let s = q.shape();
        assert!(
            s == k.shape() && s == v.shape() && s.len() == 2,
            "attention shape mismatch: q {:?} k {:?} v {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        );
        let (rows, d) = (s[0], s[1]);
        assert!(batch > 0 && rows % batch == 0, "attention: {rows} rows not divisible by batch {batch}");
        assert!(heads > 0 && d % heads == 0, "attention: width {d} not divisible by heads {heads}");
        let t = rows / batch;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let qd = q.data_vec();
        let kd = k.data_vec();
        let vd = v.data_vec();
        let mut out = vec![0.0; rows * d];
        // Attention weights per (instance, head), each t x t.
        let mut weights = vec![0.0; batch * heads * t * t];
        let mut scores = vec![0.0; t * t];
        for b in 0..batch {
            let r0 = b * t;
            for h in 0..heads {
                let c0 = h * dh;
                for i in 0..t {
                    for j in 0..t {
                        let qi = &qd[(r0 + i) * d + c0..(r0 + i) * d + c0 + dh];
                        let kj = &kd[(r0 + j) * d + c0..(r0 + j) * d + c0 + dh];
                        let dot: f64 = qi.iter().zip(kj).map(|(a, b)| a * b).sum();
                        scores[i * t + j] = dot * scale;
                    }
                }
                let w0 = (b * heads + h) * t * t;
                for i in 0..t {
                    softmax_row_into(&scores[i * t..(i + 1) * t], &mut weights[w0 + i * t..w0 + (i + 1) * t]);
                }
                for i in 0..t {
                    for j in 0..t {
                        let w = weights[w0 + i * t + j];
                        if w == 0.0 {
                            continue;
                        }
                        let vr = &vd[(r0 + j) * d + c0..(r0 + j) * d + c0 + dh];
                        let orow = &mut out[(r0 + i) * d + c0..(r0 + i) * d + c0 + dh];
                        for c in 0..dh {
                            orow[c] += w * vr[c];
                        }
                    }
                }
            }
        }

        Tensor::from_op(
            vec![rows, d],
            out,
            vec![q.clone(), k.clone(), v.clone()],
            Box::new(move |g, parents| {
                let mut dq = vec![0.0; rows * d];
                let mut dk = vec![0.0; rows * d];
                let mut dv = vec![0.0; rows * d];
                let mut dp = vec![0.0; t * t];
                let mut ds = vec![0.0; t * t];
                for b in 0..batch {
                    let r0 = b * t;
                    for h in 0..heads {
                        let c0 = h * dh;
                        let w0 = (b * heads + h) * t * t;
                        // dV += P^T dO ; dP = dO V^T
                        for i in 0..t {
                            let go = &g[(r0 + i) * d + c0..(r0 + i) * d + c0 + dh];
                            for j in 0..t {
                                let w = weights[w0 + i * t + j];
                                let vr = &vd[(r0 + j) * d + c0..(r0 + j) * d + c0 + dh];
                                let dvr = &mut dv[(r0 + j) * d + c0..(r0 + j) * d + c0 + dh];
                                let mut dot = 0.0;
                                for c in 0..dh {
                                    dvr[c] += w * go[c];
                                    dot += go[c] * vr[c];
                                }
                                dp[i * t + j] = dot;
                            }
                        }
                        // Softmax backward per row, then the score scale.
                        for i in 0..t {
                            let wr = &weights[w0 + i * t..w0 + (i + 1) * t];
                            let dpr = &dp[i * t..(i + 1) * t];
                            let dot: f64 = wr.iter().zip(dpr).map(|(a, b)| a * b).sum();
                            for j in 0..t {
                                ds[i * t + j] = wr[j] * (dpr[j] - dot) * scale;
                            }
                        }
                        // dQ += dS K ; dK += dS^T Q
                        for i in 0..t {
                            let dqr_base = (r0 + i) * d + c0;
                            for j in 0..t {
                                let sij = ds[i * t + j];
                                if sij == 0.0 {
                                    continue;
                                }
                                let kr = &kd[(r0 + j) * d + c0..(r0 + j) * d + c0 + dh];
                                let qr = &qd[dqr_base..dqr_base + dh];
                                let dkr = &mut dk[(r0 + j) * d + c0..(r0 + j) * d + c0 + dh];
                                for c in 0..dh {
                                    dkr[c] += sij * qr[c];
                                }
                                let dqr = &mut dq[dqr_base..dqr_base + dh];
                                for c in 0..dh {
                                    dqr[c] += sij * kr[c];
                                }
                            }
                        }
                    }
                }
                parents[0].accumulate_grad(&dq);
                parents[1].accumulate_grad(&dk);
                parents[2].accumulate_grad(&dv);
            }),
        )
    }

    /// Prepend a shared learned token to every instance of a row-stacked
    /// batch: `(batch*seq) x d` tokens plus a length-d vector become
    /// `(batch*(seq+1)) x d`, the shared token first in each instance.
    pub fn prepend_token(tokens: &Tensor, shared: &Tensor, batch: usize) -> Tensor {
        check_finite("prepend_token", tokens);
        check_finite("prepend_token", shared);
        let s = tokens.shape();
        assert_eq!(s.len(), 2, "prepend_token: tokens must be 2-d, got {:?}", s);
        let (rows, d) = (s[0], s[1]);
        assert!(batch > 0 && rows % batch == 0, "prepend_token: {rows} rows not divisible by batch {batch}");
        assert_eq!(
            shared.shape(),
            vec![d],
            "prepend_token shape mismatch: tokens {:?} shared {:?}",
            s,
            shared.shape()
        );
        let seq = rows / batch;
        let t = seq + 1;
        let x = tokens.data_vec();
        let c = shared.data_vec();
        let mut out = vec![0.0; batch * t * d];
        for b in 0..batch {
            out[b * t * d..b * t * d + d].copy_from_slice(&c);
            out[b * t * d + d..(b + 1) * t * d].copy_from_slice(&x[b * seq * d..(b + 1) * seq * d]);
        }
        Tensor::from_op(
            vec![batch * t, d],
            out,
            vec![tokens.clone(), shared.clone()],
            Box::new(move |g, parents| {
                if parents[0].requires_grad() {
                    let mut dx = vec![0.0; rows * d];
                    for b in 0..batch {
                        dx[b * seq * d..(b + 1) * seq * d]
                            .copy_from_slice(&g[b * t * d + d..(b + 1) * t * d]);
                    }
                    parents[0].accumulate_grad(&dx);
                }
                if parents[1].requires_grad() {
                    let mut dc = vec![0.0; d];
                    for b in 0..batch {
                        for j in 0..d {
                            dc[j] += g[b * t * d + j];
                        }
                    }
                    parents[1].accumulate_grad(&dc);
                }
            }),
        )
    }

    /// Extract the leading (class) token of each instance: `(batch*t) x d`
    /// rows become `batch x d`.
    pub fn take_leading_rows(&self, batch: usize) -> Tensor {
        check_finite("take_leading_rows", self);
        let s = self.shape();
        assert_eq!(s.len(), 2, "take_leading_rows: input must be 2-d, got {:?}", s);
        let (rows, d) = (s[0], s[1]);
        assert!(batch > 0 && rows % batch == 0, "take_leading_rows: {rows} rows not divisible by batch {batch}");
        let t = rows / batch;
        let x = self.data_vec();
        let mut out = vec![0.0; batch * d];
        for b in 0..batch {
            out[b * d..(b + 1) * d].copy_from_slice(&x[b * t * d..b * t * d + d]);
        }
        Tensor::from_op(
            vec![batch, d],
            out,
            vec![self.clone()],
            Box::new(move |g, parents| {
                let mut dx = vec![0.0; rows * d];
                for b in 0..batch {
                    dx[b * t * d..b * t * d + d].copy_from_slice(&g[b * d..(b + 1) * d]);
                }
                parents[0].accumulate_grad(&dx);
            }),
        )
    }

    /// Mean over each instance's non-leading token rows: `(batch*t) x d`
    /// rows become `batch x d`, averaging rows `1..t` of every instance.
    pub fn mean_token_rows(&self, batch: usize) -> Tensor {
        check_finite("mean_token_rows", self);
        let s = self.shape();
        assert_eq!(s.len(), 2, "mean_token_rows: input must be 2-d, got {:?}", s);
        let (rows, d) = (s[0], s[1]);
        assert!(batch > 0 && rows % batch == 0, "mean_token_rows: {rows} rows not divisible by batch {batch}");
        let t = rows / batch;
        assert!(t > 1, "mean_token_rows: needs at least one non-leading row per instance");
        let seq = t - 1;
        let x = self.data_vec();
        let mut out = vec![0.0; batch * d];
        for b in 0..batch {
            for i in 1..t {
                for j in 0..d {
                    out[b * d + j] += x[(b * t + i) * d + j];
                }
            }
            for j in 0..d {
                out[b * d + j] /= seq as f64;
            }
        }
        Tensor::from_op(
            vec![batch, d],
            out,
            vec![self.clone()],
            Box::new(move |g, parents| {
                let mut dx = vec![0.0; rows * d];
                for b in 0..batch {
                    for i in 1..t {
                        for j in 0..d {
                            dx[(b * t + i) * d + j] = g[b * d + j] / seq as f64;
                        }
                    }
                }
                parents[0].accumulate_grad(&dx);
            }),
        )
    }
}

fn binary_elementwise(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
    grads: impl Fn(&[f64]) -> (Vec<f64>, Vec<f64>) + 'static,
) -> Tensor {
    check_finite(op, a);
    check_finite(op, b);
    let (sa, sb) = (a.shape(), b.shape());
    assert_eq!(sa, sb, "{op} shape mismatch: lhs {:?} rhs {:?}", sa, sb);
    let data: Vec<f64> = a
        .data_vec()
        .iter()
        .zip(b.data_vec().iter())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::from_op(
        sa,
        data,
        vec![a.clone(), b.clone()],
        Box::new(move |g, parents| {
            let (da, db) = grads(g);
            parents[0].accumulate_grad(&da);
            parents[1].accumulate_grad(&db);
        }),
    )
}
