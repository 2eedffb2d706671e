//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! The graph is define-by-run: every operation on a tensor that (transitively)
//! requires gradients records how it was produced, and [`Tensor::backward`]
//! replays those records in reverse topological order. Gradients accumulate
//! additively; [`Tensor::zero_grad`] clears them between steps.
//!
//! A graph and its tensors belong to one thread. Distinct training runs can
//! proceed in parallel as long as they share no tensors.

use std::cell::{Ref, RefCell};
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use thiserror::Error;

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

/// Minimum row norm accepted by [`Tensor::l2_normalize_rows`].
pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: invalid shape {shape:?}: {reason}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },
    #[error("{op}: domain violation: {reason}")]
    Domain { op: &'static str, reason: String },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("l2_normalize: row {index} has norm {norm:.3e} (minimum {NORM_EPS:.0e})")]
    DegenerateVector { index: usize, norm: f64 },
    #[error("backward: loss must be a scalar, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("{op}: {reason}")]
    Contract { op: &'static str, reason: String },
}

fn contract(op: &'static str, reason: impl Into<String>) -> TensorError {
    TensorError::Contract {
        op,
        reason: reason.into(),
    }
}

/// Parameters of a 2D convolution, recorded for the backward rule.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvParams {
    pub batch: usize,
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub filters: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

/// How a tensor was produced. Holds the inputs (graph edges) plus whatever
/// the backward rule needs beyond the node's own value.
enum BackOp {
    Add {
        a: Tensor,
        b: Tensor,
    },
    /// `a: [n, d] + b: [d]`, the one broadcast the encoder needs (bias rows).
    AddRow {
        a: Tensor,
        b: Tensor,
    },
    Sub {
        a: Tensor,
        b: Tensor,
    },
    Mul {
        a: Tensor,
        b: Tensor,
    },
    Div {
        a: Tensor,
        b: Tensor,
    },
    MatMul {
        a: Tensor,
        b: Tensor,
        m: usize,
        k: usize,
        n: usize,
    },
    Transpose {
        a: Tensor,
        rows: usize,
        cols: usize,
    },
    Exp {
        a: Tensor,
    },
    Log {
        a: Tensor,
    },
    Relu {
        a: Tensor,
    },
    Sum {
        a: Tensor,
    },
    Mean {
        a: Tensor,
    },
    Scale {
        a: Tensor,
        factor: f64,
    },
    ConcatRows {
        parts: Vec<Tensor>,
        part_lens: Vec<usize>,
    },
    SliceRows {
        a: Tensor,
        start_elem: usize,
        len_elems: usize,
        total_elems: usize,
    },
    Reshape {
        a: Tensor,
    },
    /// Per-row unit normalization; saves each row's pre-normalization norm.
    L2NormalizeRows {
        a: Tensor,
        norms: Vec<f64>,
        row_len: usize,
    },
    Conv2d {
        input: Tensor,
        weight: Tensor,
        bias: Option<Tensor>,
        params: ConvParams,
    },
    /// Fused mean negative log-softmax; saves the softmax probabilities.
    CrossEntropy {
        logits: Tensor,
        labels: Rc<Vec<usize>>,
        probs: Vec<f64>,
        classes: usize,
    },
}

struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
    op: Option<BackOp>,
}

/// A dense n-dimensional value, optionally participating in the gradient graph.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<RefCell<Inner>>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let inner = self.inner.borrow();
        f.debug_struct("Tensor")
            .field("shape", &inner.shape)
            .field("requires_grad", &inner.requires_grad)
            .finish()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn from_parts(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, op: Option<BackOp>) -> Tensor {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor {
            inner: Rc::new(RefCell::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data,
                requires_grad,
                grad: None,
                op,
            })),
        }
    }

    /// Build a tensor from flat data. Fails if the shape does not cover the data.
    pub fn from_vec(data: Vec<f64>, shape: &[usize], requires_grad: bool) -> Result<Tensor, TensorError> {
        if shape.iter().any(|&d| d == 0) || numel(shape) != data.len() {
            return Err(TensorError::InvalidShape {
                op: "from_vec",
                shape: shape.to_vec(),
                reason: format!("does not cover {} data elements", data.len()),
            });
        }
        Ok(Tensor::from_parts(shape.to_vec(), data, requires_grad, None))
    }

    /// Build a `[rows, cols]` matrix from row-major data.
    pub fn from_rows(rows: &[Vec<f64>], requires_grad: bool) -> Result<Tensor, TensorError> {
        if rows.is_empty() {
            return Err(TensorError::InvalidShape {
                op: "from_rows",
                shape: vec![0],
                reason: "no rows".into(),
            });
        }
        let cols = rows[0].len();
        if cols == 0 || rows.iter().any(|r| r.len() != cols) {
            return Err(TensorError::InvalidShape {
                op: "from_rows",
                shape: vec![rows.len(), cols],
                reason: "ragged or empty rows".into(),
            });
        }
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            data.extend_from_slice(r);
        }
        Ok(Tensor::from_parts(vec![rows.len(), cols], data, requires_grad, None))
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::from_parts(vec![1], vec![v], false, None)
    }

    pub fn filled(shape: &[usize], v: f64) -> Tensor {
        Tensor::from_parts(shape.to_vec(), vec![v; numel(shape)], false, None)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::filled(shape, 0.0)
    }

    pub fn id(&self) -> u64 {
        self.inner.borrow().id
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

    pub fn requires_grad(&self) -> bool {
        self.inner.borrow().requires_grad
    }

    /// Borrowed view of the values.
    pub fn borrow_data(&self) -> Ref<'_, [f64]> {
        Ref::map(self.inner.borrow(), |i| i.data.as_slice())
    }

    /// Owned copy of the values.
    pub fn value(&self) -> Vec<f64> {
        self.inner.borrow().data.clone()
    }

    /// The single value of a scalar tensor.
    pub fn item(&self) -> f64 {
        let inner = self.inner.borrow();
        assert_eq!(inner.data.len(), 1, "item() on non-scalar tensor");
        inner.data[0]
    }

    /// Owned copy of the gradient, if backward has reached this tensor.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.borrow().grad.clone()
    }

    /// Clear the accumulated gradient.
    pub fn zero_grad(&self) {
        self.inner.borrow_mut().grad = None;
    }

    /// Overwrite the values in place (used by the optimizer). Shape is fixed.
    pub fn set_data(&self, data: Vec<f64>) -> Result<(), TensorError> {
        let mut inner = self.inner.borrow_mut();
        if data.len() != inner.data.len() {
            return Err(contract("set_data", "length differs from tensor size"));
        }
        inner.data = data;
        Ok(())
    }

    fn check_finite(self, op: &'static str) -> Result<Tensor, TensorError> {
        {
            let inner = self.inner.borrow();
            if !inner.data.iter().all(|v| v.is_finite()) {
                return Err(TensorError::NonFinite { op });
            }
        }
        Ok(self)
    }

    fn make_result(
        shape: Vec<usize>,
        data: Vec<f64>,
        requires_grad: bool,
        op: BackOp,
        name: &'static str,
    ) -> Result<Tensor, TensorError> {
        let op = if requires_grad { Some(op) } else { None };
        Tensor::from_parts(shape, data, requires_grad, op).check_finite(name)
    }

    // ── elementwise ──────────────────────────────────────────────────

    /// Elementwise addition. Also accepts a `[d]` right operand against an
    /// `[n, d]` left operand (row broadcast, for bias terms).
    pub fn add(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        let (la, lb) = (self.shape(), other.shape());
        if la == lb {
            let data: Vec<f64> = {
                let a = self.borrow_data();
                let b = other.borrow_data();
                a.iter().zip(b.iter()).map(|(x, y)| x + y).collect()
            };
            let rg = self.requires_grad() || other.requires_grad();
            return Tensor::make_result(
                la,
                data,
                rg,
                BackOp::Add {
                    a: self.clone(),
                    b: other.clone(),
                },
                "add",
            );
        }
        if la.len() == 2 && lb.len() == 1 && la[1] == lb[0] {
            let (n, d) = (la[0], la[1]);
            let data: Vec<f64> = {
                let a = self.borrow_data();
                let b = other.borrow_data();
                let mut out = Vec::with_capacity(n * d);
                for r in 0..n {
                    for c in 0..d {
                        out.push(a[r * d + c] + b[c]);
                    }
                }
                out
            };
            let rg = self.requires_grad() || other.requires_grad();
            return Tensor::make_result(
                la,
                data,
                rg,
                BackOp::AddRow {
                    a: self.clone(),
                    b: other.clone(),
                },
                "add",
            );
        }
        Err(TensorError::ShapeMismatch {
            op: "add",
            lhs: la,
            rhs: lb,
        })
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        self.zip_same_shape(other, "sub", |x, y| x - y, |a, b| BackOp::Sub { a, b })
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        self.zip_same_shape(other, "mul", |x, y| x * y, |a, b| BackOp::Mul { a, b })
    }

    /// Elementwise division. The divisor must be nonzero everywhere.
    pub fn div(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        if other.borrow_data().iter().any(|&v| v == 0.0) {
            return Err(TensorError::Domain {
                op: "div",
                reason: "divisor contains zero".into(),
            });
        }
        self.zip_same_shape(other, "div", |x, y| x / y, |a, b| BackOp::Div { a, b })
    }

    fn zip_same_shape(
        &self,
        other: &Tensor,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        mk: impl FnOnce(Tensor, Tensor) -> BackOp,
    ) -> Result<Tensor, TensorError> {
        let (la, lb) = (self.shape(), other.shape());
        if la != lb {
            return Err(TensorError::ShapeMismatch {
                op: name,
                lhs: la,
                rhs: lb,
            });
        }
        let data: Vec<f64> = {
            let a = self.borrow_data();
            let b = other.borrow_data();
            a.iter().zip(b.iter()).map(|(&x, &y)| f(x, y)).collect()
        };
        let rg = self.requires_grad() || other.requires_grad();
        Tensor::make_result(la, data, rg, mk(self.clone(), other.clone()), name)
    }

    pub fn exp(&self) -> Result<Tensor, TensorError> {
        let data: Vec<f64> = self.borrow_data().iter().map(|v| v.exp()).collect();
        Tensor::make_result(
            self.shape(),
            data,
            self.requires_grad(),
            BackOp::Exp { a: self.clone() },
            "exp",
        )
    }

    /// Natural logarithm. Inputs must be strictly positive.
    pub fn log(&self) -> Result<Tensor, TensorError> {
        if self.borrow_data().iter().any(|&v| v <= 0.0) {
            return Err(TensorError::Domain {
                op: "log",
                reason: "input has an entry <= 0".into(),
            });
        }
        let data: Vec<f64> = self.borrow_data().iter().map(|v| v.ln()).collect();
        Tensor::make_result(
            self.shape(),
            data,
            self.requires_grad(),
            BackOp::Log { a: self.clone() },
            "log",
        )
    }

    pub fn relu(&self) -> Result<Tensor, TensorError> {
        let data: Vec<f64> = self.borrow_data().iter().map(|v| v.max(0.0)).collect();
        Tensor::make_result(
            self.shape(),
            data,
            self.requires_grad(),
            BackOp::Relu { a: self.clone() },
            "relu",
        )
    }

    pub fn scale(&self, factor: f64) -> Result<Tensor, TensorError> {
        let data: Vec<f64> = self.borrow_data().iter().map(|v| v * factor).collect();
        Tensor::make_result(
            self.shape(),
            data,
            self.requires_grad(),
            BackOp::Scale {
                a: self.clone(),
                factor,
            },
            "scale",
        )
    }

    pub fn neg(&self) -> Result<Tensor, TensorError> {
        self.scale(-1.0)
    }

    // ── reductions ───────────────────────────────────────────────────

    /// Sum of all entries, as a `[1]` scalar.
    pub fn sum(&self) -> Result<Tensor, TensorError> {
        let total: f64 = self.borrow_data().iter().sum();
        Tensor::make_result(
            vec![1],
            vec![total],
            self.requires_grad(),
            BackOp::Sum { a: self.clone() },
            "sum",
        )
    }

    /// Mean of all entries, as a `[1]` scalar.
    pub fn mean(&self) -> Result<Tensor, TensorError> {
        let n = self.len();
        let total: f64 = self.borrow_data().iter().sum();
        Tensor::make_result(
            vec![1],
            vec![total / n as f64],
            self.requires_grad(),
            BackOp::Mean { a: self.clone() },
            "mean",
        )
    }

    // ── linear algebra / shape ───────────────────────────────────────

    /// Matrix product of two 2D tensors.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        let (la, lb) = (self.shape(), other.shape());
        if la.len() != 2 || lb.len() != 2 || la[1] != lb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: la,
                rhs: lb,
            });
        }
        let (m, k, n) = (la[0], la[1], lb[1]);
        let data = {
            let a = self.borrow_data();
            let b = other.borrow_data();
            matmul_raw(&a, &b, m, k, n)
        };
        let rg = self.requires_grad() || other.requires_grad();
        Tensor::make_result(
            vec![m, n],
            data,
            rg,
            BackOp::MatMul {
                a: self.clone(),
                b: other.clone(),
                m,
                k,
                n,
            },
            "matmul",
        )
    }

    pub fn transpose(&self) -> Result<Tensor, TensorError> {
        let shape = self.shape();
        if shape.len() != 2 {
            return Err(TensorError::InvalidShape {
                op: "transpose",
                shape,
                reason: "expected a 2D tensor".into(),
            });
        }
        let (rows, cols) = (shape[0], shape[1]);
        let data = {
            let a = self.borrow_data();
            transpose_raw(&a, rows, cols)
        };
        Tensor::make_result(
            vec![cols, rows],
            data,
            self.requires_grad(),
            BackOp::Transpose {
                a: self.clone(),
                rows,
                cols,
            },
            "transpose",
        )
    }

    /// Concatenate 2D tensors along axis 0. All parts must share their column count.
    pub fn concat_rows(parts: &[Tensor]) -> Result<Tensor, TensorError> {
        if parts.is_empty() {
            return Err(contract("concat", "no inputs"));
        }
        let first = parts[0].shape();
        if first.len() != 2 {
            return Err(TensorError::InvalidShape {
                op: "concat",
                shape: first,
                reason: "expected 2D tensors".into(),
            });
        }
        let cols = first[1];
        let mut rows = 0;
        for p in parts {
            let s = p.shape();
            if s.len() != 2 || s[1] != cols {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first,
                    rhs: s,
                });
            }
            rows += s[0];
        }
        let mut data = Vec::with_capacity(rows * cols);
        let mut part_lens = Vec::with_capacity(parts.len());
        for p in parts {
            let d = p.borrow_data();
            part_lens.push(d.len());
            data.extend_from_slice(&d);
        }
        let rg = parts.iter().any(|p| p.requires_grad());
        Tensor::make_result(
            vec![rows, cols],
            data,
            rg,
            BackOp::ConcatRows {
                parts: parts.to_vec(),
                part_lens,
            },
            "concat",
        )
    }

    /// Rows `[start, start+len)` of a 2D tensor.
    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Tensor, TensorError> {
        let shape = self.shape();
        if shape.len() != 2 {
            return Err(TensorError::InvalidShape {
                op: "slice",
                shape,
                reason: "expected a 2D tensor".into(),
            });
        }
        let (rows, cols) = (shape[0], shape[1]);
        if len == 0 || start + len > rows {
            return Err(contract(
                "slice",
                format!("rows [{start}, {}) out of 0..{rows}", start + len),
            ));
        }
        let data = self.borrow_data()[start * cols..(start + len) * cols].to_vec();
        Tensor::make_result(
            vec![len, cols],
            data,
            self.requires_grad(),
            BackOp::SliceRows {
                a: self.clone(),
                start_elem: start * cols,
                len_elems: len * cols,
                total_elems: rows * cols,
            },
            "slice",
        )
    }

    /// Same data, new shape covering the same element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor, TensorError> {
        if numel(shape) != self.len() || shape.iter().any(|&d| d == 0) {
            return Err(TensorError::InvalidShape {
                op: "reshape",
                shape: shape.to_vec(),
                reason: format!("does not cover {} elements", self.len()),
            });
        }
        let data = self.value();
        Tensor::make_result(
            shape.to_vec(),
            data,
            self.requires_grad(),
            BackOp::Reshape { a: self.clone() },
            "reshape",
        )
    }

    /// Normalize each last-axis vector of a 2D tensor to unit Euclidean norm.
    ///
    /// The backward rule projects the incoming gradient onto the tangent space
    /// of the unit sphere and divides by the original norm.
    pub fn l2_normalize_rows(&self) -> Result<Tensor, TensorError> {
        let shape = self.shape();
        if shape.len() != 2 {
            return Err(TensorError::InvalidShape {
                op: "l2_normalize",
                shape,
                reason: "expected a 2D tensor".into(),
            });
        }
        let (rows, cols) = (shape[0], shape[1]);
        let mut norms = Vec::with_capacity(rows);
        let mut data = Vec::with_capacity(rows * cols);
        {
            let a = self.borrow_data();
            for r in 0..rows {
                let row = &a[r * cols..(r + 1) * cols];
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm < NORM_EPS {
                    return Err(TensorError::DegenerateVector { index: r, norm });
                }
                norms.push(norm);
                data.extend(row.iter().map(|v| v / norm));
            }
        }
        Tensor::make_result(
            shape,
            data,
            self.requires_grad(),
            BackOp::L2NormalizeRows {
                a: self.clone(),
                norms,
                row_len: cols,
            },
            "l2_normalize",
        )
    }

    /// Mean negative log-softmax of the true class, computed with a
    /// max-shifted log-sum-exp. `logits` is `[n, classes]`.
    pub fn cross_entropy(&self, labels: &[usize]) -> Result<Tensor, TensorError> {
        let shape = self.shape();
        if shape.len() != 2 {
            return Err(TensorError::InvalidShape {
                op: "cross_entropy",
                shape,
                reason: "expected [n, classes] logits".into(),
            });
        }
        let (n, classes) = (shape[0], shape[1]);
        if classes < 2 {
            return Err(contract("cross_entropy", "needs at least 2 classes"));
        }
        if labels.len() != n {
            return Err(contract(
                "cross_entropy",
                format!("{} labels for {n} rows", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(contract(
                "cross_entropy",
                format!("label {bad} out of range 0..{classes}"),
            ));
        }
        let mut probs = vec![0.0; n * classes];
        let mut total = 0.0;
        {
            let a = self.borrow_data();
            for r in 0..n {
                let row = &a[r * classes..(r + 1) * classes];
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut denom = 0.0;
                for (c, &v) in row.iter().enumerate() {
                    let e = (v - max).exp();
                    probs[r * classes + c] = e;
                    denom += e;
                }
                for c in 0..classes {
                    probs[r * classes + c] /= denom;
                }
                total += denom.ln() + max - row[labels[r]];
            }
        }
        Tensor::make_result(
            vec![1],
            vec![total / n as f64],
            self.requires_grad(),
            BackOp::CrossEntropy {
                logits: self.clone(),
                labels: Rc::new(labels.to_vec()),
                probs,
                classes,
            },
            "cross_entropy",
        )
    }

    pub(crate) fn conv2d_internal(
        input: &Tensor,
        weight: &Tensor,
        bias: Option<&Tensor>,
        params: ConvParams,
        data: Vec<f64>,
        out_shape: Vec<usize>,
    ) -> Result<Tensor, TensorError> {
        let rg = input.requires_grad()
            || weight.requires_grad()
            || bias.map(|b| b.requires_grad()).unwrap_or(false);
        Tensor::make_result(
            out_shape,
            data,
            rg,
            BackOp::Conv2d {
                input: input.clone(),
                weight: weight.clone(),
                bias: bias.cloned(),
                params,
            },
            "conv2d",
        )
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse-mode sweep from a scalar loss. Every tensor with
    /// `requires_grad` reachable from this node receives (accumulates)
    /// its gradient.
    pub fn backward(&self) -> Result<(), TensorError> {
        {
            let inner = self.inner.borrow();
            if inner.data.len() != 1 {
                return Err(TensorError::NonScalarLoss {
                    shape: inner.shape.clone(),
                });
            }
        }
        let order = topo_order(self);
        // Interior grads are scratch for the sweep; stale values from an
        // earlier backward would compound. Leaves accumulate across calls.
        for node in &order {
            let mut inner = node.inner.borrow_mut();
            if inner.op.is_some() {
                inner.grad = None;
            }
        }
        accumulate(self, &[1.0]);

        for node in order.iter().rev() {
            let grad = {
                let inner = node.inner.borrow();
                match &inner.grad {
                    Some(g) => g.clone(),
                    None => continue,
                }
            };
            let inner = node.inner.borrow();
            if let Some(op) = &inner.op {
                backprop_op(op, &inner.data, &grad);
            }
        }
        Ok(())
    }
}

/// Post-order DFS over the graph rooted at `loss`: inputs appear before the
/// nodes consuming them.
fn topo_order(loss: &Tensor) -> Vec<Tensor> {
    let mut order = Vec::new();
    let mut visited = HashSet::new();
    // (node, expanded?) explicit stack to avoid recursion limits.
    let mut stack = vec![(loss.clone(), false)];
    while let Some((node, expanded)) = stack.pop() {
        if expanded {
            order.push(node);
            continue;
        }
        if !visited.insert(node.id()) {
            continue;
        }
        stack.push((node.clone(), true));
        let inner = node.inner.borrow();
        if let Some(op) = &inner.op {
            for parent in op_inputs(op) {
                if !visited.contains(&parent.id()) {
                    stack.push((parent, false));
                }
            }
        }
    }
    order
}

fn op_inputs(op: &BackOp) -> Vec<Tensor> {
    match op {
        BackOp::Add { a, b }
        | BackOp::AddRow { a, b }
        | BackOp::Sub { a, b }
        | BackOp::Mul { a, b }
        | BackOp::Div { a, b }
        | BackOp::MatMul { a, b, .. } => vec![a.clone(), b.clone()],
        BackOp::Transpose { a, .. }
        | BackOp::Exp { a }
        | BackOp::Log { a }
        | BackOp::Relu { a }
        | BackOp::Sum { a }
        | BackOp::Mean { a }
        | BackOp::Scale { a, .. }
        | BackOp::SliceRows { a, .. }
        | BackOp::Reshape { a }
        | BackOp::L2NormalizeRows { a, .. } => vec![a.clone()],
        BackOp::ConcatRows { parts, .. } => parts.clone(),
        BackOp::Conv2d {
            input, weight, bias, ..
        } => {
            let mut v = vec![input.clone(), weight.clone()];
            if let Some(b) = bias {
                v.push(b.clone());
            }
            v
        }
        BackOp::CrossEntropy { logits, .. } => vec![logits.clone()],
    }
}

pub(crate) fn accumulate_external(t: &Tensor, contribution: &[f64]) {
    accumulate(t, contribution);
}

fn accumulate(t: &Tensor, contribution: &[f64]) {
    if !t.requires_grad() {
        return;
    }
    let mut inner = t.inner.borrow_mut();
    let n = inner.data.len();
    debug_assert_eq!(contribution.len(), n);
    match &mut inner.grad {
        Some(g) => {
            for (gi, ci) in g.iter_mut().zip(contribution) {
                *gi += ci;
            }
        }
        None => inner.grad = Some(contribution.to_vec()),
    }
}

fn backprop_op(op: &BackOp, out_data: &[f64], g: &[f64]) {
    match op {
        BackOp::Add { a, b } => {
            accumulate(a, g);
            accumulate(b, g);
        }
        BackOp::AddRow { a, b } => {
            accumulate(a, g);
            if b.requires_grad() {
                let d = b.len();
                let mut gb = vec![0.0; d];
                for (i, &gi) in g.iter().enumerate() {
                    gb[i % d] += gi;
                }
                accumulate(b, &gb);
            }
        }
        BackOp::Sub { a, b } => {
            accumulate(a, g);
            if b.requires_grad() {
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                accumulate(b, &neg);
            }
        }
        BackOp::Mul { a, b } => {
            if a.requires_grad() {
                let bd = b.borrow_data();
                let ga: Vec<f64> = g.iter().zip(bd.iter()).map(|(x, y)| x * y).collect();
                drop(bd);
                accumulate(a, &ga);
            }
            if b.requires_grad() {
                let ad = a.borrow_data();
                let gb: Vec<f64> = g.iter().zip(ad.iter()).map(|(x, y)| x * y).collect();
                drop(ad);
                accumulate(b, &gb);
            }
        }
        BackOp::Div { a, b } => {
            if a.requires_grad() {
                let bd = b.borrow_data();
                let ga: Vec<f64> = g.iter().zip(bd.iter()).map(|(x, y)| x / y).collect();
                drop(bd);
                accumulate(a, &ga);
            }
            if b.requires_grad() {
                let gb: Vec<f64> = {
                    let ad = a.borrow_data();
                    let bd = b.borrow_data();
                    g.iter()
                        .zip(ad.iter().zip(bd.iter()))
                        .map(|(gi, (x, y))| -gi * x / (y * y))
                        .collect()
                };
                accumulate(b, &gb);
            }
        }
        BackOp::MatMul { a, b, m, k, n } => {
            let (m, k, n) = (*m, *k, *n);
            if a.requires_grad() {
                // dA = g @ B^T
                let ga = {
                    let bd = b.borrow_data();
                    let bt = transpose_raw(&bd, k, n);
                    matmul_raw(g, &bt, m, n, k)
                };
                accumulate(a, &ga);
            }
            if b.requires_grad() {
                // dB = A^T @ g
                let gb = {
                    let ad = a.borrow_data();
                    let at = transpose_raw(&ad, m, k);
                    matmul_raw(&at, g, k, m, n)
                };
                accumulate(b, &gb);
            }
        }
        BackOp::Transpose { a, rows, cols } => {
            if a.requires_grad() {
                let ga = transpose_raw(g, *cols, *rows);
                accumulate(a, &ga);
            }
        }
        BackOp::Exp { a } => {
            if a.requires_grad() {
                let ga: Vec<f64> = g.iter().zip(out_data.iter()).map(|(x, y)| x * y).collect();
                accumulate(a, &ga);
            }
        }
        BackOp::Log { a } => {
            if a.requires_grad() {
                let ad = a.borrow_data();
                let ga: Vec<f64> = g.iter().zip(ad.iter()).map(|(x, y)| x / y).collect();
                drop(ad);
                accumulate(a, &ga);
            }
        }
        BackOp::Relu { a } => {
            if a.requires_grad() {
                let ad = a.borrow_data();
                let ga: Vec<f64> = g
                    .iter()
                    .zip(ad.iter())
                    .map(|(x, y)| if *y > 0.0 { *x } else { 0.0 })
                    .collect();
                drop(ad);
                accumulate(a, &ga);
            }
        }
        BackOp::Sum { a } => {
            if a.requires_grad() {
                let ga = vec![g[0]; a.len()];
                accumulate(a, &ga);
            }
        }
        BackOp::Mean { a } => {
            if a.requires_grad() {
                let ga = vec![g[0] / a.len() as f64; a.len()];
                accumulate(a, &ga);
            }
        }
        BackOp::Scale { a, factor } => {
            if a.requires_grad() {
                let ga: Vec<f64> = g.iter().map(|v| v * factor).collect();
                accumulate(a, &ga);
            }
        }
        BackOp::ConcatRows { parts, part_lens } => {
            let mut offset = 0;
            for (p, &len) in parts.iter().zip(part_lens) {
                if p.requires_grad() {
                    accumulate(p, &g[offset..offset + len]);
                }
                offset += len;
            }
        }
        BackOp::SliceRows {
            a,
            start_elem,
            len_elems,
            total_elems,
        } => {
            if a.requires_grad() {
                let mut ga = vec![0.0; *total_elems];
                ga[*start_elem..*start_elem + *len_elems].copy_from_slice(g);
                accumulate(a, &ga);
            }
        }
        BackOp::Reshape { a } => {
            if a.requires_grad() {
                accumulate(a, g);
            }
        }
        BackOp::L2NormalizeRows { a, norms, row_len } => {
            if a.requires_grad() {
                let d = *row_len;
                let mut ga = vec![0.0; g.len()];
                for (r, &norm) in norms.iter().enumerate() {
                    let y = &out_data[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    let dot: f64 = gr.iter().zip(y.iter()).map(|(x, v)| x * v).sum();
                    for c in 0..d {
                        ga[r * d + c] = (gr[c] - y[c] * dot) / norm;
                    }
                }
                accumulate(a, &ga);
            }
        }
        BackOp::Conv2d {
            input,
            weight,
            bias,
            params,
        } => {
            crate::conv::conv2d_backward(input, weight, bias.as_ref(), *params, g);
        }
        BackOp::CrossEntropy {
            logits,
            labels,
            probs,
            classes,
        } => {
            if logits.requires_grad() {
                let n = labels.len();
                let scale = g[0] / n as f64;
                let mut gl = probs.clone();
                for (r, &y) in labels.iter().enumerate() {
                    gl[r * classes + y] -= 1.0;
                }
                for v in gl.iter_mut() {
                    *v *= scale;
                }
                accumulate(logits, &gl);
            }
        }
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

pub(crate) fn transpose_raw(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

// ── dynamic dispatch over the op set ─────────────────────────────────

/// The supported forward operations, for callers that build graphs dynamically.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Op {
    MatMul,
    Add,
    Sub,
    Mul,
    Div,
    Exp,
    Log,
    Sum,
    Mean,
    Relu,
    Concat,
    Slice { start: usize, len: usize },
    Scale(f64),
}

/// Apply `op` to `inputs`, recording on the gradient graph when any input
/// requires gradients.
pub fn forward_op(op: Op, inputs: &[&Tensor]) -> Result<Tensor, TensorError> {
    let arity = |n: usize| -> Result<(), TensorError> {
        if inputs.len() != n {
            Err(contract(
                "forward_op",
                format!("{op:?} expects {n} inputs, got {}", inputs.len()),
            ))
        } else {
            Ok(())
        }
    };
    match op {
        Op::MatMul => {
            arity(2)?;
            inputs[0].matmul(inputs[1])
        }
        Op::Add => {
            arity(2)?;
            inputs[0].add(inputs[1])
        }
        Op::Sub => {
            arity(2)?;
            inputs[0].sub(inputs[1])
        }
        Op::Mul => {
            arity(2)?;
            inputs[0].mul(inputs[1])
        }
        Op::Div => {
            arity(2)?;
            inputs[0].div(inputs[1])
        }
        Op::Exp => {
            arity(1)?;
            inputs[0].exp()
        }
        Op::Log => {
            arity(1)?;
            inputs[0].log()
        }
        Op::Sum => {
            arity(1)?;
            inputs[0].sum()
        }
        Op::Mean => {
            arity(1)?;
            inputs[0].mean()
        }
        Op::Relu => {
            arity(1)?;
            inputs[0].relu()
        }
        Op::Concat => {
            if inputs.is_empty() {
                return Err(contract("forward_op", "Concat expects at least 1 input"));
            }
            let owned: Vec<Tensor> = inputs.iter().map(|t| (*t).clone()).collect();
            Tensor::concat_rows(&owned)
        }
        Op::Slice { start, len } => {
            arity(1)?;
            inputs[0].slice_rows(start, len)
        }
        Op::Scale(f) => {
            arity(1)?;
            inputs[0].scale(f)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(actual: &[f64], expected: &[f64], tol: f64) {
        assert_eq!(actual.len(), expected.len());
        for (i, (a, e)) in actual.iter().zip(expected).enumerate() {
            assert!(
                (a - e).abs() <= tol,
                "index {i}: {a} vs {e} (diff {})",
                (a - e).abs()
            );
        }
    }

    #[test]
    fn add_elementwise() {
        let a = Tensor::from_vec(vec![1.0, 2.0], &[2], false).unwrap();
        let b = Tensor::from_vec(vec![3.0, 4.0], &[2], false).unwrap();
        assert_eq!(a.add(&b).unwrap().value(), vec![4.0, 6.0]);
    }

    #[test]
    fn matmul_identity() {
        let eye = Tensor::from_vec(
            vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
            &[3, 3],
            false,
        )
        .unwrap();
        let a = Tensor::from_vec((1..=9).map(f64::from).collect(), &[3, 3], false).unwrap();
        assert_eq!(eye.matmul(&a).unwrap().value(), a.value());
    }

    #[test]
    fn exp_log_inverse_pair() {
        let x = Tensor::from_vec(vec![0.5, 2.0], &[2], false).unwrap();
        let y = x.log().unwrap().exp().unwrap();
        assert_close(&y.value(), &[0.5, 2.0], 1e-12);
    }

    #[test]
    fn log_rejects_nonpositive() {
        let x = Tensor::from_vec(vec![1.0, 0.0], &[2], false).unwrap();
        assert!(matches!(x.log(), Err(TensorError::Domain { .. })));
    }

    #[test]
    fn shape_mismatch_names_op_and_shapes() {
        let a = Tensor::from_vec(vec![1.0, 2.0], &[2], false).unwrap();
        let b = Tensor::from_vec(vec![1.0, 2.0, 3.0], &[3], false).unwrap();
        let err = a.add(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("add") && msg.contains("[2]") && msg.contains("[3]"), "{msg}");
    }

    #[test]
    fn l2_normalize_three_four_five() {
        let x = Tensor::from_vec(vec![3.0, 4.0], &[1, 2], false).unwrap();
        assert_close(&x.l2_normalize_rows().unwrap().value(), &[0.6, 0.8], 1e-15);
    }

    #[test]
    fn l2_normalize_unit_is_identity() {
        let x = Tensor::from_vec(vec![0.6, 0.8], &[1, 2], false).unwrap();
        assert_close(&x.l2_normalize_rows().unwrap().value(), &[0.6, 0.8], 1e-15);
    }

    #[test]
    fn l2_normalize_axis_case() {
        let x = Tensor::from_vec(vec![2.0, 0.0, 0.0], &[1, 3], false).unwrap();
        assert_close(
            &x.l2_normalize_rows().unwrap().value(),
            &[1.0, 0.0, 0.0],
            1e-15,
        );
    }

    #[test]
    fn l2_normalize_rejects_near_zero() {
        let x = Tensor::from_vec(vec![0.0, 1e-13], &[1, 2], false).unwrap();
        assert!(matches!(
            x.l2_normalize_rows(),
            Err(TensorError::DegenerateVector { .. })
        ));
    }

    #[test]
    fn backward_sum_gives_ones() {
        let x = Tensor::from_vec(vec![1.0, 2.0, 3.0], &[3], true).unwrap();
        x.sum().unwrap().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_dot_quadratic() {
        // loss = x . x  via elementwise mul + sum; d/dx = 2x
        let x = Tensor::from_vec(vec![1.0, 2.0], &[2], true).unwrap();
        let loss = x.mul(&x).unwrap().sum().unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let x = Tensor::from_vec(vec![1.0, 2.0], &[2], true).unwrap();
        let y = x.scale(2.0).unwrap();
        assert!(matches!(y.backward(), Err(TensorError::NonScalarLoss { .. })));
    }

    #[test]
    fn shared_subexpression_accumulates() {
        // loss = sum(2x) + sum(3x) => dx = 5 each
        let x = Tensor::from_vec(vec![1.0, 1.0], &[2], true).unwrap();
        let a = x.scale(2.0).unwrap().sum().unwrap();
        let b = x.scale(3.0).unwrap().sum().unwrap();
        let loss = a.add(&b).unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![5.0, 5.0]);
    }

    #[test]
    fn repeated_backward_after_reset_is_identical() {
        let x = Tensor::from_vec(vec![0.3, -0.7, 1.1], &[1, 3], true).unwrap();
        let loss = x
            .l2_normalize_rows()
            .unwrap()
            .mul(&x.l2_normalize_rows().unwrap())
            .unwrap()
            .sum()
            .unwrap();
        loss.backward().unwrap();
        let g1 = x.grad().unwrap();
        x.zero_grad();
        loss.backward().unwrap();
        let g2 = x.grad().unwrap();
        assert_eq!(g1, g2);
    }

    #[test]
    fn backward_linearity() {
        // backward of a*f + b*g equals a*grad(f) + b*grad(g)
        let mk = || Tensor::from_vec(vec![0.4, -1.2, 2.0], &[3], true).unwrap();
        let (a, b) = (2.5, -1.25);

        let x = mk();
        let f = x.mul(&x).unwrap().sum().unwrap();
        let g = x.exp().unwrap().sum().unwrap();
        let combo = f.scale(a).unwrap().add(&g.scale(b).unwrap()).unwrap();
        combo.backward().unwrap();
        let combined = x.grad().unwrap();

        let xf = mk();
        xf.mul(&xf).unwrap().sum().unwrap().backward().unwrap();
        let gf = xf.grad().unwrap();
        let xg = mk();
        xg.exp().unwrap().sum().unwrap().backward().unwrap();
        let gg = xg.grad().unwrap();

        let expected: Vec<f64> = gf.iter().zip(&gg).map(|(f, g)| a * f + b * g).collect();
        assert_close(&combined, &expected, 1e-12);
    }

    #[test]
    fn matmul_backward_matches_manual() {
        // out = A @ B, loss = sum(out); dA = ones @ B^T, dB = A^T @ ones
        let a = Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0], &[2, 2], true).unwrap();
        let b = Tensor::from_vec(vec![5.0, 6.0, 7.0, 8.0], &[2, 2], true).unwrap();
        a.matmul(&b).unwrap().sum().unwrap().backward().unwrap();
        assert_eq!(a.grad().unwrap(), vec![11.0, 15.0, 11.0, 15.0]);
        assert_eq!(b.grad().unwrap(), vec![4.0, 4.0, 6.0, 6.0]);
    }

    #[test]
    fn concat_slice_roundtrip_with_grads() {
        let a = Tensor::from_vec(vec![1.0, 2.0], &[1, 2], true).unwrap();
        let b = Tensor::from_vec(vec![3.0, 4.0], &[1, 2], true).unwrap();
        let cat = Tensor::concat_rows(&[a.clone(), b.clone()]).unwrap();
        let back = cat.slice_rows(1, 1).unwrap();
        assert_eq!(back.value(), vec![3.0, 4.0]);
        back.sum().unwrap().backward().unwrap();
        assert_eq!(a.grad(), Some(vec![0.0, 0.0]));
        assert_eq!(b.grad(), Some(vec![1.0, 1.0]));
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let logits = Tensor::zeros(&[1, 10]);
        let logits = Tensor::from_vec(logits.value(), &[1, 10], true).unwrap();
        let loss = logits.cross_entropy(&[3]).unwrap();
        assert!((loss.item() - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_label_out_of_range() {
        let logits = Tensor::zeros(&[1, 3]);
        assert!(matches!(
            logits.cross_entropy(&[3]),
            Err(TensorError::Contract { .. })
        ));
    }

    #[test]
    fn forward_op_dispatch_matches_methods() {
        let a = Tensor::from_vec(vec![1.0, 2.0], &[2], false).unwrap();
        let b = Tensor::from_vec(vec![3.0, 4.0], &[2], false).unwrap();
        let via_op = forward_op(Op::Add, &[&a, &b]).unwrap();
        assert_eq!(via_op.value(), vec![4.0, 6.0]);
        let via_op = forward_op(Op::Scale(2.0), &[&a]).unwrap();
        assert_eq!(via_op.value(), vec![2.0, 4.0]);
    }

    // central finite differences over a scalar-valued graph builder
    fn fd_check(build: impl Fn(&Tensor) -> Tensor, x0: Vec<f64>, shape: &[usize]) {
        let x = Tensor::from_vec(x0.clone(), shape, true).unwrap();
        let loss = build(&x);
        loss.backward().unwrap();
        let analytic = x.grad().unwrap();

        let h = 1e-5;
        for i in 0..x0.len() {
            let mut plus = x0.clone();
            plus[i] += h;
            let mut minus = x0.clone();
            minus[i] -= h;
            let fp = build(&Tensor::from_vec(plus, shape, false).unwrap()).item();
            let fm = build(&Tensor::from_vec(minus, shape, false).unwrap()).item();
            let numeric = (fp - fm) / (2.0 * h);
            let denom = numeric.abs().max(analytic[i].abs()).max(1.0);
            assert!(
                (numeric - analytic[i]).abs() / denom < 1e-4,
                "coord {i}: analytic {} vs numeric {numeric}",
                analytic[i]
            );
        }
    }

    #[test]
    fn fd_composite_graph() {
        fd_check(
            |x| {
                let n = x.l2_normalize_rows().unwrap();
                let s = n.matmul(&n.transpose().unwrap()).unwrap();
                let e = s.scale(3.0).unwrap().exp().unwrap();
                e.log().unwrap().mean().unwrap()
            },
            vec![0.3, -0.9, 1.4, 0.2, 0.8, -0.5],
            &[2, 3],
        );
    }

    #[test]
    fn fd_relu_div_graph() {
        fd_check(
            |x| {
                let r = x.relu().unwrap();
                let shifted = r.add(&Tensor::filled(&[4], 1.5)).unwrap();
                let ratio = x.div(&shifted).unwrap();
                ratio.mul(&ratio).unwrap().sum().unwrap()
            },
            vec![0.7, -0.3, 1.2, 2.1],
            &[4],
        );
    }
}
