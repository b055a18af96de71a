//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Value`] owns its forward result and remembers which operation
//! produced it. [`backward`] walks the recorded graph once in reverse
//! topological order and accumulates gradients into every reachable
//! node that requires them. Accumulation happens in tape order, so a
//! fixed graph always produces bit-identical gradients.
//!
//! Contractions over atom/pair axes go through [`Tensor::sum_axis`]
//! (value-sorted summation); only channel-axis contractions use the
//! plain matmul loops. See `tensor.rs` for why.

use crate::tensor::Tensor;
use std::cell::RefCell;
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;

#[derive(Debug, Clone, PartialEq)]
pub enum AutodiffError {
    /// A cosine similarity received a vector with near-zero norm.
    DegenerateVector { norm: f64 },
}

impl fmt::Display for AutodiffError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::DegenerateVector { norm } => {
                write!(f, "degenerate vector: norm {norm:.3e} below 1e-12")
            }
        }
    }
}

impl std::error::Error for AutodiffError {}

enum Op {
    Leaf,
    Add(Value, Value),
    Sub(Value, Value),
    Mul(Value, Value),
    Div(Value, Value),
    MatMul(Value, Value),
    Neg(Value),
    Exp(Value),
    Cos(Value),
    Sqrt(Value),
    Square(Value),
    Abs(Value),
    Silu(Value),
    Sigmoid(Value),
    Scale(Value, f64),
    AddScalar(Value),
    SumAll(Value),
    SumAxis(Value, usize),
    Reshape(Value),
    GatherRows(Value, Vec<usize>),
    ScatterRows {
        src: Value,
        fill: Value,
        positions: Vec<usize>,
        masked: Vec<usize>,
    },
    SliceLast {
        src: Value,
        start: usize,
        len: usize,
    },
    ConcatLast(Vec<Value>),
    LayerNormRows {
        src: Value,
        eps: f64,
    },
    SoftmaxLast(Value),
    SoftmaxCrossEntropy {
        logits: Value,
        targets: Vec<usize>,
    },
    PairwiseDist(Value),
}

struct Node {
    data: RefCell<Tensor>,
    grad: RefCell<Option<Tensor>>,
    requires_grad: std::cell::Cell<bool>,
    op: Op,
}

/// A node in the differentiation graph: forward data plus provenance.
#[derive(Clone)]
pub struct Value(Rc<Node>);

impl fmt::Debug for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Value")
            .field("shape", &self.data().shape())
            .field("requires_grad", &self.0.requires_grad.get())
            .finish()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Value {
    fn new(data: Tensor, requires_grad: bool, op: Op) -> Value {
        Value(Rc::new(Node {
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad: std::cell::Cell::new(requires_grad),
            op,
        }))
    }

    /// A leaf with no parents. Parameters are leaves with
    /// `requires_grad = true`; constants (masks, targets) are not.
    pub fn leaf(data: Tensor, requires_grad: bool) -> Value {
        Value::new(data, requires_grad, Op::Leaf)
    }

    pub fn param(data: Tensor) -> Value {
        Value::leaf(data, true)
    }

    pub fn constant(data: Tensor) -> Value {
        Value::leaf(data, false)
    }

    pub fn scalar(v: f64) -> Value {
        Value::constant(Tensor::scalar(v))
    }

    pub fn data(&self) -> std::cell::Ref<'_, Tensor> {
        self.0.data.borrow()
    }

    /// Replace the stored tensor (same shape). Used by the optimizer and
    /// by finite-difference probes; never call on an op output mid-graph.
    pub fn set_data(&self, t: Tensor) {
        assert_eq!(
            self.data().shape(),
            t.shape(),
            "set_data must preserve shape"
        );
        *self.0.data.borrow_mut() = t;
    }

    pub fn shape(&self) -> Vec<usize> {
        self.data().shape().to_vec()
    }

    pub fn len(&self) -> usize {
        self.data().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad.get()
    }

    /// Flip gradient tracking on a leaf. Turning it off on a parameter
    /// prunes it (and anything reachable only through it) from future
    /// backward passes; existing graphs are unaffected.
    pub fn set_requires_grad(&self, on: bool) {
        self.0.requires_grad.set(on);
    }

    pub fn grad(&self) -> Option<Tensor> {
        self.0.grad.borrow().clone()
    }

    /// Gradient, or zeros of the right shape when nothing reached this node.
    pub fn grad_or_zeros(&self) -> Tensor {
        self.grad()
            .unwrap_or_else(|| Tensor::zeros(self.data().shape()))
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    fn accumulate_grad(&self, g: &Tensor) {
        let mut slot = self.0.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => acc.add_assign(g),
            None => *slot = Some(g.clone()),
        }
    }

    fn unary(&self, f: impl Fn(&Tensor) -> Tensor, op: Op) -> Value {
        Value::new(f(&self.data()), self.0.requires_grad.get(), op)
    }

    fn binary_broadcast(&self, other: &Value, f: impl Fn(f64, f64) -> f64, op: Op) -> Value {
        let out = self
            .data()
            .broadcast_zip(&other.data(), f)
            .unwrap_or_else(|e| panic!("{e}"));
        Value::new(out, self.0.requires_grad.get() || other.0.requires_grad.get(), op)
    }

    pub fn add(&self, other: &Value) -> Value {
        self.binary_broadcast(other, |a, b| a + b, Op::Add(self.clone(), other.clone()))
    }

    pub fn sub(&self, other: &Value) -> Value {
        self.binary_broadcast(other, |a, b| a - b, Op::Sub(self.clone(), other.clone()))
    }

    pub fn mul(&self, other: &Value) -> Value {
        self.binary_broadcast(other, |a, b| a * b, Op::Mul(self.clone(), other.clone()))
    }

    pub fn div(&self, other: &Value) -> Value {
        self.binary_broadcast(other, |a, b| a / b, Op::Div(self.clone(), other.clone()))
    }

    /// 2-D matrix product. Panics with a dimension error naming both
    /// shapes when the inner dimensions disagree.
    pub fn matmul(&self, other: &Value) -> Value {
        let out = self
            .data()
            .matmul(&other.data())
            .unwrap_or_else(|e| panic!("{e}"));
        Value::new(
            out,
            self.0.requires_grad.get() || other.0.requires_grad.get(),
            Op::MatMul(self.clone(), other.clone()),
        )
    }

    pub fn neg(&self) -> Value {
        self.unary(|t| t.map(|v| -v), Op::Neg(self.clone()))
    }

    pub fn exp(&self) -> Value {
        self.unary(|t| t.map(f64::exp), Op::Exp(self.clone()))
    }

    pub fn cos(&self) -> Value {
        self.unary(|t| t.map(f64::cos), Op::Cos(self.clone()))
    }

    pub fn sqrt(&self) -> Value {
        self.unary(|t| t.map(f64::sqrt), Op::Sqrt(self.clone()))
    }

    pub fn square(&self) -> Value {
        self.unary(|t| t.map(|v| v * v), Op::Square(self.clone()))
    }

    pub fn abs(&self) -> Value {
        self.unary(|t| t.map(f64::abs), Op::Abs(self.clone()))
    }

    /// x * sigmoid(x).
    pub fn silu(&self) -> Value {
        self.unary(|t| t.map(|v| v * sigmoid(v)), Op::Silu(self.clone()))
    }

    pub fn sigmoid(&self) -> Value {
        self.unary(|t| t.map(sigmoid), Op::Sigmoid(self.clone()))
    }

    pub fn scale(&self, c: f64) -> Value {
        self.unary(|t| t.map(|v| v * c), Op::Scale(self.clone(), c))
    }

    pub fn add_scalar(&self, c: f64) -> Value {
        self.unary(|t| t.map(|v| v + c), Op::AddScalar(self.clone()))
    }

    pub fn sum_all(&self) -> Value {
        self.unary(
            |t| Tensor::scalar(t.sum_all()),
            Op::SumAll(self.clone()),
        )
    }

    pub fn mean_all(&self) -> Value {
        let n = self.len() as f64;
        self.sum_all().scale(1.0 / n)
    }

    pub fn sum_axis(&self, axis: usize) -> Value {
        self.unary(|t| t.sum_axis(axis), Op::SumAxis(self.clone(), axis))
    }

    pub fn reshape(&self, shape: &[usize]) -> Value {
        self.unary(|t| t.reshaped(shape), Op::Reshape(self.clone()))
    }

    /// Select rows of a rank >= 2 tensor (or entries of a vector).
    /// Indices may repeat; gradients scatter-add back.
    pub fn gather_rows(&self, indices: &[usize]) -> Value {
        let data = self.data();
        let shape = data.shape();
        let rows = shape[0];
        let inner: usize = shape[1..].iter().product();
        for &i in indices {
            assert!(i < rows, "gather index {i} out of range {rows}");
        }
        let mut out = Vec::with_capacity(indices.len() * inner);
        for &i in indices {
            out.extend_from_slice(&data.data()[i * inner..(i + 1) * inner]);
        }
        let mut out_shape = vec![indices.len()];
        out_shape.extend_from_slice(&shape[1..]);
        drop(data);
        Value::new(
            Tensor::from_vec(out, &out_shape),
            self.0.requires_grad.get(),
            Op::GatherRows(self.clone(), indices.to_vec()),
        )
    }

    /// Scatter `self`'s rows into a taller matrix: row r lands at
    /// `positions[r]`, every row in `masked` gets the shared `fill`
    /// vector. `positions` and `masked` must partition `0..n_rows`.
    pub fn scatter_rows(&self, positions: &[usize], masked: &[usize], fill: &Value) -> Value {
        let data = self.data();
        let shape = data.shape();
        assert_eq!(shape.len(), 2, "scatter_rows expects a matrix");
        let d = shape[1];
        assert_eq!(fill.shape(), vec![d], "fill width must match row width");
        let n_rows = positions.len() + masked.len();
        assert_eq!(
            positions.len(),
            shape[0],
            "scatter_rows bookkeeping mismatch: {} source rows, {} positions",
            shape[0],
            positions.len()
        );
        let mut seen = vec![false; n_rows];
        for &p in positions.iter().chain(masked.iter()) {
            assert!(p < n_rows && !seen[p], "scatter_rows rows must partition 0..{n_rows}");
            seen[p] = true;
        }
        let fill_data = fill.data();
        let mut out = vec![0.0; n_rows * d];
        for (r, &p) in positions.iter().enumerate() {
            out[p * d..(p + 1) * d].copy_from_slice(&data.data()[r * d..(r + 1) * d]);
        }
        for &m in masked {
            out[m * d..(m + 1) * d].copy_from_slice(fill_data.data());
        }
        drop(data);
        drop(fill_data);
        Value::new(
            Tensor::from_vec(out, &[n_rows, d]),
            self.0.requires_grad.get() || fill.0.requires_grad.get(),
            Op::ScatterRows {
                src: self.clone(),
                fill: fill.clone(),
                positions: positions.to_vec(),
                masked: masked.to_vec(),
            },
        )
    }

    /// Contiguous slice along the last axis.
    pub fn slice_last(&self, start: usize, len: usize) -> Value {
        let data = self.data();
        let shape = data.shape().to_vec();
        let last = *shape.last().unwrap();
        assert!(start + len <= last, "slice {start}..{} exceeds width {last}", start + len);
        let outer: usize = shape[..shape.len() - 1].iter().product();
        let mut out = Vec::with_capacity(outer * len);
        for o in 0..outer {
            let base = o * last + start;
            out.extend_from_slice(&data.data()[base..base + len]);
        }
        let mut out_shape = shape.clone();
        *out_shape.last_mut().unwrap() = len;
        drop(data);
        Value::new(
            Tensor::from_vec(out, &out_shape),
            self.0.requires_grad.get(),
            Op::SliceLast {
                src: self.clone(),
                start,
                len,
            },
        )
    }

    /// Concatenate along the last axis.
    pub fn concat_last(parts: &[Value]) -> Value {
        assert!(!parts.is_empty());
        let lead = &parts[0].shape()[..parts[0].shape().len() - 1].to_vec();
        let widths: Vec<usize> = parts
            .iter()
            .map(|p| {
                let s = p.shape();
                assert_eq!(&s[..s.len() - 1], lead.as_slice(), "concat leading dims differ");
                *s.last().unwrap()
            })
            .collect();
        let total: usize = widths.iter().sum();
        let outer: usize = lead.iter().product();
        let mut out = Vec::with_capacity(outer * total);
        let datas: Vec<_> = parts.iter().map(|p| p.data().clone()).collect();
        for o in 0..outer {
            for (p, w) in datas.iter().zip(widths.iter()) {
                out.extend_from_slice(&p.data()[o * w..(o + 1) * w]);
            }
        }
        let mut out_shape = lead.clone();
        out_shape.push(total);
        Value::new(
            Tensor::from_vec(out, &out_shape),
            parts.iter().any(|p| p.0.requires_grad.get()),
            Op::ConcatLast(parts.to_vec()),
        )
    }

    /// Per-row normalization to zero mean, unit variance (biased), over
    /// the last axis. Learnable scales are applied by the caller.
    pub fn layer_norm_rows(&self, eps: f64) -> Value {
        let out = layer_norm_forward(&self.data(), eps);
        Value::new(
            out,
            self.0.requires_grad.get(),
            Op::LayerNormRows {
                src: self.clone(),
                eps,
            },
        )
    }

    /// Numerically stable softmax along the last axis; the denominator is
    /// an order-invariant sum so the result survives index permutations.
    pub fn softmax_last(&self) -> Value {
        let out = softmax_forward(&self.data());
        Value::new(out, self.0.requires_grad.get(), Op::SoftmaxLast(self.clone()))
    }

    /// Mean cross-entropy of row logits against integer targets.
    pub fn softmax_cross_entropy(&self, targets: &[usize]) -> Value {
        let data = self.data();
        let shape = data.shape();
        assert_eq!(shape.len(), 2);
        let (b, k) = (shape[0], shape[1]);
        assert_eq!(targets.len(), b);
        let mut total = 0.0;
        for (row, &t) in targets.iter().enumerate() {
            assert!(t < k, "target {t} out of range {k}");
            let logits = &data.data()[row * k..(row + 1) * k];
            let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + logits.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
            total += lse - logits[t];
        }
        drop(data);
        Value::new(
            Tensor::scalar(total / b as f64),
            self.0.requires_grad.get(),
            Op::SoftmaxCrossEntropy {
                logits: self.clone(),
                targets: targets.to_vec(),
            },
        )
    }

    /// All pairwise Euclidean distances of an (N,3) coordinate matrix.
    /// The diagonal is exactly zero and receives no gradient.
    pub fn pairwise_dist(&self) -> Value {
        let data = self.data();
        let shape = data.shape();
        assert_eq!(shape.len(), 2);
        assert_eq!(shape[1], 3, "pairwise_dist expects (N,3) coordinates");
        let n = shape[0];
        let x = data.data();
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for j in (i + 1)..n {
                let dx = x[i * 3] - x[j * 3];
                let dy = x[i * 3 + 1] - x[j * 3 + 1];
                let dz = x[i * 3 + 2] - x[j * 3 + 2];
                let r = (dx * dx + dy * dy + dz * dz).sqrt();
                out[i * n + j] = r;
                out[j * n + i] = r;
            }
        }
        drop(data);
        Value::new(
            Tensor::from_vec(out, &[n, n]),
            self.0.requires_grad.get(),
            Op::PairwiseDist(self.clone()),
        )
    }

    /// Forward-identity copy that blocks all gradient flow: the result is
    /// a fresh leaf with `requires_grad = false` and a bit-exact copy of
    /// the data.
    pub fn stop_gradient(&self) -> Value {
        Value::leaf(self.data().clone(), false)
    }

    fn ptr(&self) -> usize {
        Rc::as_ptr(&self.0) as usize
    }

    fn parents(&self) -> Vec<Value> {
        match &self.0.op {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::MatMul(a, b) => {
                vec![a.clone(), b.clone()]
            }
            Op::Neg(a)
            | Op::Exp(a)
            | Op::Cos(a)
            | Op::Sqrt(a)
            | Op::Square(a)
            | Op::Abs(a)
            | Op::Silu(a)
            | Op::Sigmoid(a)
            | Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::SumAll(a)
            | Op::SumAxis(a, _)
            | Op::Reshape(a)
            | Op::GatherRows(a, _)
            | Op::SliceLast { src: a, .. }
            | Op::LayerNormRows { src: a, .. }
            | Op::SoftmaxLast(a)
            | Op::SoftmaxCrossEntropy { logits: a, .. }
            | Op::PairwiseDist(a) => vec![a.clone()],
            Op::ScatterRows { src, fill, .. } => vec![src.clone(), fill.clone()],
            Op::ConcatLast(parts) => parts.clone(),
        }
    }

    fn backprop(&self) {
        let g = match self.0.grad.borrow().as_ref() {
            Some(g) => g.clone(),
            None => return,
        };
        match &self.0.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if a.0.requires_grad.get() {
                    a.accumulate_grad(&g.reduce_to_shape(&a.shape()));
                }
                if b.0.requires_grad.get() {
                    b.accumulate_grad(&g.reduce_to_shape(&b.shape()));
                }
            }
            Op::Sub(a, b) => {
                if a.0.requires_grad.get() {
                    a.accumulate_grad(&g.reduce_to_shape(&a.shape()));
                }
                if b.0.requires_grad.get() {
                    b.accumulate_grad(&g.reduce_to_shape(&b.shape()).scale(-1.0));
                }
            }
            Op::Mul(a, b) => {
                if a.0.requires_grad.get() {
                    let ga = g.broadcast_zip(&b.data(), |gv, bv| gv * bv).unwrap();
                    a.accumulate_grad(&ga.reduce_to_shape(&a.shape()));
                }
                if b.0.requires_grad.get() {
                    let gb = g.broadcast_zip(&a.data(), |gv, av| gv * av).unwrap();
                    b.accumulate_grad(&gb.reduce_to_shape(&b.shape()));
                }
            }
            Op::Div(a, b) => {
                if a.0.requires_grad.get() {
                    let ga = g.broadcast_zip(&b.data(), |gv, bv| gv / bv).unwrap();
                    a.accumulate_grad(&ga.reduce_to_shape(&a.shape()));
                }
                if b.0.requires_grad.get() {
                    let num = g.broadcast_zip(&a.data(), |gv, av| gv * av).unwrap();
                    let gb = num
                        .broadcast_zip(&b.data(), |nv, bv| -nv / (bv * bv))
                        .unwrap();
                    b.accumulate_grad(&gb.reduce_to_shape(&b.shape()));
                }
            }
            Op::MatMul(a, b) => {
                if a.0.requires_grad.get() {
                    let ga = g.matmul(&b.data().transpose2()).unwrap();
                    a.accumulate_grad(&ga);
                }
                if b.0.requires_grad.get() {
                    let gb = a.data().transpose2().matmul(&g).unwrap();
                    b.accumulate_grad(&gb);
                }
            }
            Op::Neg(a) => {
                if a.0.requires_grad.get() {
                    a.accumulate_grad(&g.scale(-1.0));
                }
            }
            Op::Exp(a) => {
                if a.0.requires_grad.get() {
                    a.accumulate_grad(&g.zip(&self.data(), |gv, ov| gv * ov));
                }
            }
            Op::Cos(a) => {
                if a.0.requires_grad.get() {
                    a.accumulate_grad(&g.zip(&a.data(), |gv, xv| -gv * xv.sin()));
                }
            }
            Op::Sqrt(a) => {
                if a.0.requires_grad.get() {
                    a.accumulate_grad(&g.zip(&self.data(), |gv, ov| gv * 0.5 / ov));
                }
            }
            Op::Square(a) => {
                if a.0.requires_grad.get() {
                    a.accumulate_grad(&g.zip(&a.data(), |gv, xv| gv * 2.0 * xv));
                }
            }
            Op::Abs(a) => {
                if a.0.requires_grad.get() {
                    a.accumulate_grad(&g.zip(&a.data(), |gv, xv| gv * sign(xv)));
                }
            }
            Op::Silu(a) => {
                if a.0.requires_grad.get() {
                    a.accumulate_grad(&g.zip(&a.data(), |gv, xv| {
                        let s = sigmoid(xv);
                        gv * s * (1.0 + xv * (1.0 - s))
                    }));
                }
            }
            Op::Sigmoid(a) => {
                if a.0.requires_grad.get() {
                    a.accumulate_grad(&g.zip(&self.data(), |gv, sv| gv * sv * (1.0 - sv)));
                }
            }
            Op::Scale(a, c) => {
                if a.0.requires_grad.get() {
                    a.accumulate_grad(&g.scale(*c));
                }
            }
            Op::AddScalar(a) => {
                if a.0.requires_grad.get() {
                    a.accumulate_grad(&g);
                }
            }
            Op::SumAll(a) => {
                if a.0.requires_grad.get() {
                    a.accumulate_grad(&Tensor::full(&a.shape(), g.scalar_value()));
                }
            }
            Op::SumAxis(a, axis) => {
                if a.0.requires_grad.get() {
                    a.accumulate_grad(&expand_axis(&g, *axis, a.shape()[*axis], &a.shape()));
                }
            }
            Op::Reshape(a) => {
                if a.0.requires_grad.get() {
                    a.accumulate_grad(&g.reshaped(&a.shape()));
                }
            }
            Op::GatherRows(a, indices) => {
                if a.0.requires_grad.get() {
                    let shape = a.shape();
                    let inner: usize = shape[1..].iter().product();
                    let mut gp = Tensor::zeros(&shape);
                    for (r, &i) in indices.iter().enumerate() {
                        for c in 0..inner {
                            gp.data_mut()[i * inner + c] += g.data()[r * inner + c];
                        }
                    }
                    a.accumulate_grad(&gp);
                }
            }
            Op::ScatterRows {
                src,
                fill,
                positions,
                masked,
            } => {
                let d = fill.len();
                if src.0.requires_grad.get() {
                    let mut gs = Tensor::zeros(&src.shape());
                    for (r, &p) in positions.iter().enumerate() {
                        gs.data_mut()[r * d..(r + 1) * d].copy_from_slice(&g.data()[p * d..(p + 1) * d]);
                    }
                    src.accumulate_grad(&gs);
                }
                if fill.0.requires_grad.get() {
                    let mut gf = Tensor::zeros(&[d]);
                    for &m in masked {
                        for c in 0..d {
                            gf.data_mut()[c] += g.data()[m * d + c];
                        }
                    }
                    fill.accumulate_grad(&gf);
                }
            }
            Op::SliceLast { src, start, len } => {
                if src.0.requires_grad.get() {
                    let shape = src.shape();
                    let last = *shape.last().unwrap();
                    let outer: usize = shape[..shape.len() - 1].iter().product();
                    let mut gs = Tensor::zeros(&shape);
                    for o in 0..outer {
                        for c in 0..*len {
                            gs.data_mut()[o * last + start + c] = g.data()[o * len + c];
                        }
                    }
                    src.accumulate_grad(&gs);
                }
            }
            Op::ConcatLast(parts) => {
                let widths: Vec<usize> = parts.iter().map(|p| *p.shape().last().unwrap()).collect();
                let total: usize = widths.iter().sum();
                let outer = g.len() / total;
                let mut offset = 0;
                for (p, w) in parts.iter().zip(widths.iter()) {
                    if p.0.requires_grad.get() {
                        let mut gp = Tensor::zeros(&p.shape());
                        for o in 0..outer {
                            for c in 0..*w {
                                gp.data_mut()[o * w + c] = g.data()[o * total + offset + c];
                            }
                        }
                        p.accumulate_grad(&gp);
                    }
                    offset += w;
                }
            }
            Op::LayerNormRows { src, eps } => {
                if src.0.requires_grad.get() {
                    src.accumulate_grad(&layer_norm_backward(&src.data(), &g, *eps));
                }
            }
            Op::SoftmaxLast(a) => {
                if a.0.requires_grad.get() {
                    let s = self.data();
                    let shape = s.shape().to_vec();
                    let k = *shape.last().unwrap();
                    let outer = s.len() / k;
                    let mut ga = Tensor::zeros(&shape);
                    for o in 0..outer {
                        let srow = &s.data()[o * k..(o + 1) * k];
                        let grow = &g.data()[o * k..(o + 1) * k];
                        let dot: f64 = srow.iter().zip(grow.iter()).map(|(&sv, &gv)| sv * gv).sum();
                        for c in 0..k {
                            ga.data_mut()[o * k + c] = srow[c] * (grow[c] - dot);
                        }
                    }
                    a.accumulate_grad(&ga);
                }
            }
            Op::SoftmaxCrossEntropy { logits, targets } => {
                if logits.0.requires_grad.get() {
                    let l = logits.data();
                    let shape = l.shape().to_vec();
                    let (b, k) = (shape[0], shape[1]);
                    let gs = g.scalar_value() / b as f64;
                    let mut gl = Tensor::zeros(&shape);
                    for (row, &t) in targets.iter().enumerate() {
                        let lrow = &l.data()[row * k..(row + 1) * k];
                        let m = lrow.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                        let denom: f64 = lrow.iter().map(|&v| (v - m).exp()).sum();
                        for c in 0..k {
                            let p = (lrow[c] - m).exp() / denom;
                            gl.data_mut()[row * k + c] = gs * (p - if c == t { 1.0 } else { 0.0 });
                        }
                    }
                    drop(l);
                    logits.accumulate_grad(&gl);
                }
            }
            Op::PairwiseDist(a) => {
                if a.0.requires_grad.get() {
                    let x = a.data();
                    let n = x.shape()[0];
                    let r = self.data();
                    let mut gx = Tensor::zeros(&[n, 3]);
                    for i in 0..n {
                        for j in 0..n {
                            if i == j {
                                continue;
                            }
                            let rij = r.at2(i, j);
                            if rij == 0.0 {
                                continue;
                            }
                            let gv = g.at2(i, j);
                            if gv == 0.0 {
                                continue;
                            }
                            for c in 0..3 {
                                let u = (x.at2(i, c) - x.at2(j, c)) / rij;
                                gx.data_mut()[i * 3 + c] += gv * u;
                                gx.data_mut()[j * 3 + c] -= gv * u;
                            }
                        }
                    }
                    drop(x);
                    drop(r);
                    a.accumulate_grad(&gx);
                }
            }
        }
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn expand_axis(g: &Tensor, axis: usize, size: usize, target_shape: &[usize]) -> Tensor {
    let mut out = Tensor::zeros(target_shape);
    let outer: usize = target_shape[..axis].iter().product();
    let inner: usize = target_shape[axis + 1..].iter().product();
    for o in 0..outer {
        for m in 0..size {
            for i in 0..inner {
                out.data_mut()[(o * size + m) * inner + i] = g.data()[o * inner + i];
            }
        }
    }
    out
}

fn layer_norm_forward(x: &Tensor, eps: f64) -> Tensor {
    let shape = x.shape().to_vec();
    let k = *shape.last().unwrap();
    let outer = x.len() / k;
    let mut out = Tensor::zeros(&shape);
    for o in 0..outer {
        let row = &x.data()[o * k..(o + 1) * k];
        let mean = row.iter().sum::<f64>() / k as f64;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / k as f64;
        let inv = 1.0 / (var + eps).sqrt();
        for c in 0..k {
            out.data_mut()[o * k + c] = (row[c] - mean) * inv;
        }
    }
    out
}

fn layer_norm_backward(x: &Tensor, g: &Tensor, eps: f64) -> Tensor {
    let shape = x.shape().to_vec();
    let k = *shape.last().unwrap();
    let outer = x.len() / k;
    let mut out = Tensor::zeros(&shape);
    for o in 0..outer {
        let row = &x.data()[o * k..(o + 1) * k];
        let grow = &g.data()[o * k..(o + 1) * k];
        let mean = row.iter().sum::<f64>() / k as f64;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / k as f64;
        let inv = 1.0 / (var + eps).sqrt();
        let xhat: Vec<f64> = row.iter().map(|&v| (v - mean) * inv).collect();
        let g_mean = grow.iter().sum::<f64>() / k as f64;
        let gx_mean = grow
            .iter()
            .zip(xhat.iter())
            .map(|(&gv, &xv)| gv * xv)
            .sum::<f64>()
            / k as f64;
        for c in 0..k {
            out.data_mut()[o * k + c] = inv * (grow[c] - g_mean - xhat[c] * gx_mean);
        }
    }
    out
}

fn softmax_forward(x: &Tensor) -> Tensor {
    let shape = x.shape().to_vec();
    let k = *shape.last().unwrap();
    let outer = x.len() / k;
    let mut out = Tensor::zeros(&shape);
    let mut terms = vec![0.0; k];
    for o in 0..outer {
        let row = &x.data()[o * k..(o + 1) * k];
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for (c, t) in terms.iter_mut().enumerate() {
            *t = (row[c] - m).exp();
        }
        let exps = terms.clone();
        let denom = crate::tensor::ordered_sum(&mut terms);
        for c in 0..k {
            out.data_mut()[o * k + c] = exps[c] / denom;
        }
    }
    out
}

/// Reverse pass from a scalar loss. Every `requires_grad` node reachable
/// from `loss` receives its accumulated gradient; everything else keeps
/// `None` (read as zero).
pub fn backward(loss: &Value) {
    assert!(
        loss.data().is_scalar(),
        "backward requires a scalar loss, got shape {:?}",
        loss.data().shape()
    );
    if !loss.requires_grad() {
        return;
    }
    // iterative post-order DFS; parents visited in recorded order
    let mut order: Vec<Value> = Vec::new();
    let mut visited: HashSet<usize> = HashSet::new();
    let mut stack: Vec<(Value, bool)> = vec![(loss.clone(), false)];
    while let Some((node, expanded)) = stack.pop() {
        if expanded {
            order.push(node);
            continue;
        }
        if !visited.insert(node.ptr()) {
            continue;
        }
        stack.push((node.clone(), true));
        for p in node.parents() {
            if p.requires_grad() && !visited.contains(&p.ptr()) {
                stack.push((p, false));
            }
        }
    }
    loss.accumulate_grad(&Tensor::scalar(1.0));
    for node in order.iter().rev() {
        node.backprop();
    }
}

/// Cosine similarity of two same-shape values, differentiable in both.
/// Errors when either norm is below 1e-12.
pub fn cosine_similarity(u: &Value, v: &Value) -> Result<Value, AutodiffError> {
    assert_eq!(u.shape(), v.shape(), "cosine_similarity shape mismatch");
    let nu = u.square().sum_all().sqrt();
    let nv = v.square().sum_all().sqrt();
    for n in [&nu, &nv] {
        let norm = n.data().scalar_value();
        if norm < 1e-12 {
            return Err(AutodiffError::DegenerateVector { norm });
        }
    }
    let dot = u.mul(v).sum_all();
    Ok(dot.div(&nu.mul(&nv)))
}

/// Max relative error between the recorded gradient of `f()` w.r.t. the
/// leaf `x` and a central finite difference with step `h`. `f` must
/// rebuild the loss from `x`'s current data on every call.
pub fn finite_diff_check<F: Fn() -> Value>(f: F, x: &Value, h: f64) -> f64 {
    assert!(h > 0.0, "finite difference step must be positive");
    x.zero_grad();
    let loss = f();
    assert!(loss.data().is_scalar(), "finite_diff_check needs a scalar-valued f");
    backward(&loss);
    let analytic = x.grad_or_zeros();
    let n = x.len();
    let mut max_rel: f64 = 0.0;
    for i in 0..n {
        let orig = x.data().data()[i];
        perturb(x, i, orig + h);
        let fp = f().data().scalar_value();
        perturb(x, i, orig - h);
        let fm = f().data().scalar_value();
        perturb(x, i, orig);
        let central = (fp - fm) / (2.0 * h);
        let a = analytic.data()[i];
        let rel = (a - central).abs() / (a.abs() + central.abs() + 1e-12);
        max_rel = max_rel.max(rel);
    }
    max_rel
}

fn perturb(x: &Value, i: usize, v: f64) {
    let mut t = x.data().clone();
    t.data_mut()[i] = v;
    x.set_data(t);
}

/// Ordered collection of named parameters shared across modules.
pub struct ParamSet {
    entries: Vec<(String, Value)>,
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet { entries: Vec::new() }
    }

    pub fn register(&mut self, name: &str, v: &Value) {
        assert!(
            !self.entries.iter().any(|(n, _)| n == name),
            "duplicate parameter name {name}"
        );
        self.entries.push((name.to_string(), v.clone()));
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Value)> {
        self.entries.iter().map(|(n, v)| (n.as_str(), v))
    }

    pub fn get(&self, name: &str) -> Option<&Value> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, v)| v)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn zero_grads(&self) {
        for (_, v) in &self.entries {
            v.zero_grad();
        }
    }

    pub fn n_scalars(&self) -> usize {
        self.entries.iter().map(|(_, v)| v.len()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity_passthrough() {
        let m = Value::constant(Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]));
        let id = Value::constant(Tensor::eye(2));
        let out = m.matmul(&id);
        assert_eq!(out.data().data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    #[should_panic(expected = "matmul dimension mismatch")]
    fn matmul_mismatch_panics_with_shapes() {
        let a = Value::constant(Tensor::zeros(&[2, 3]));
        let b = Value::constant(Tensor::zeros(&[2, 3]));
        let _ = a.matmul(&b);
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        // sum(A * B) with B a column of ones: dL/dA is all ones
        let a = Value::param(Tensor::from_vec(vec![0.3, -1.2, 0.7, 2.0, 0.1, -0.5], &[3, 2]));
        let b = Value::constant(Tensor::from_vec(vec![1.0, 1.0], &[2, 1]));
        let err = finite_diff_check(|| a.matmul(&b).sum_all(), &a, 1e-6);
        assert!(err < 1e-8, "rel err {err}");
        let g = a.grad_or_zeros();
        for &v in g.data() {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn silu_values() {
        let x = Value::constant(Tensor::from_vec(vec![0.0, 1.0], &[2]));
        let y = x.silu();
        assert_eq!(y.data().data()[0], 0.0);
        // scalar evaluation oracle: 1 / (1 + e^-1)
        let oracle = 1.0 / (1.0 + (-1.0f64).exp());
        assert!((y.data().data()[1] - oracle).abs() < 1e-15);
        assert!((y.data().data()[1] - 0.731_058_578_630_004_9).abs() < 1e-12);
    }

    #[test]
    fn silu_gradient_at_zero_is_half() {
        let x = Value::param(Tensor::scalar(0.0));
        let err = finite_diff_check(|| x.silu().sum_all(), &x, 1e-6);
        assert!(err < 1e-9);
        assert!((x.grad_or_zeros().data()[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn cosine_similarity_values() {
        let u = Value::constant(Tensor::from_vec(vec![1.0, 0.0], &[2]));
        let v = Value::constant(Tensor::from_vec(vec![0.0, 1.0], &[2]));
        assert!(cosine_similarity(&u, &v).unwrap().data().scalar_value().abs() < 1e-15);

        let w = Value::constant(Tensor::from_vec(vec![2.0, -3.0, 0.5], &[3]));
        let c = cosine_similarity(&w, &w).unwrap().data().scalar_value();
        assert!((c - 1.0).abs() < 1e-12);

        let a = Value::constant(Tensor::from_vec(vec![1.0, 1.0], &[2]));
        let b = Value::constant(Tensor::from_vec(vec![1.0, 0.0], &[2]));
        let c = cosine_similarity(&a, &b).unwrap().data().scalar_value();
        assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert!((c - 0.707_106_781_2).abs() < 1e-9);
    }

    #[test]
    fn cosine_similarity_rejects_degenerate() {
        let z = Value::constant(Tensor::zeros(&[3]));
        let v = Value::constant(Tensor::from_vec(vec![1.0, 0.0, 0.0], &[3]));
        match cosine_similarity(&z, &v) {
            Err(AutodiffError::DegenerateVector { .. }) => {}
            other => panic!("expected degenerate-vector error, got {other:?}"),
        }
    }

    #[test]
    fn stop_gradient_forward_exact_and_blocking() {
        let x = Value::param(Tensor::from_vec(vec![1.5, -2.25, 1e-300], &[3]));
        let s = x.stop_gradient();
        for (a, b) in s.data().data().iter().zip(x.data().data().iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        // idempotent
        let s2 = s.stop_gradient();
        assert_eq!(s2.data().data(), s.data().data());

        // d(sum(sg(x)))/dx = 0
        let loss = s.sum_all();
        assert!(!loss.requires_grad());
        backward(&loss);
        assert!(x.grad().is_none());

        // only the live branch flows through x + sg(x)
        x.zero_grad();
        let loss = x.add(&x.stop_gradient()).sum_all();
        backward(&loss);
        for &v in x.grad_or_zeros().data() {
            assert_eq!(v, 1.0);
        }
    }

    #[test]
    fn backward_sum_of_squares() {
        let x = Value::param(Tensor::from_vec(vec![1.0, 2.0], &[2]));
        let loss = x.square().sum_all();
        backward(&loss);
        assert_eq!(x.grad_or_zeros().data(), &[2.0, 4.0]);
    }

    #[test]
    #[should_panic(expected = "scalar loss")]
    fn backward_rejects_non_scalar() {
        let x = Value::param(Tensor::from_vec(vec![1.0, 2.0], &[2]));
        backward(&x.square());
    }

    #[test]
    fn backward_deterministic_bitwise() {
        let run = || {
            let x = Value::param(Tensor::from_vec(vec![0.11, -0.37, 0.91, 1e7, -3.3], &[5]));
            let w = Value::param(Tensor::from_vec(vec![0.5, -0.25, 1.5, 2.0, 0.125], &[5]));
            let loss = x.mul(&w).silu().square().sum_all();
            backward(&loss);
            (
                x.grad_or_zeros().data().to_vec(),
                w.grad_or_zeros().data().to_vec(),
            )
        };
        let (a1, b1) = run();
        let (a2, b2) = run();
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a1), bits(&a2));
        assert_eq!(bits(&b1), bits(&b2));
    }

    #[test]
    fn finite_diff_linear_is_exact() {
        let x = Value::param(Tensor::from_vec(vec![0.4, -1.7, 2.2], &[3]));
        let err = finite_diff_check(|| x.sum_all(), &x, 1e-5);
        assert!(err < 1e-10, "rel err {err}");
    }

    #[test]
    fn finite_diff_silu_sum() {
        let x = Value::param(Tensor::from_vec(vec![-1.0, 0.0, 1.0], &[3]));
        let err = finite_diff_check(|| x.silu().sum_all(), &x, 1e-5);
        assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn finite_diff_three_layer_composition() {
        use rand::prelude::*;
        let mut rng = StdRng::seed_from_u64(11);
        let dims = [4usize, 5, 3, 1];
        let x = Value::param(Tensor::from_vec(
            (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            &[1, 4],
        ));
        let mut ws = Vec::new();
        for l in 0..3 {
            let (i, o) = (dims[l], dims[l + 1]);
            ws.push(Value::param(Tensor::from_vec(
                (0..i * o).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                &[i, o],
            )));
        }
        let f = || {
            let mut h = x.clone();
            for w in &ws {
                h = h.matmul(w).silu();
            }
            h.sum_all()
        };
        let err = finite_diff_check(f, &x, 1e-5);
        assert!(err < 1e-4, "input rel err {err}");
        for w in &ws {
            let err = finite_diff_check(f, w, 1e-5);
            assert!(err < 1e-4, "weight rel err {err}");
        }
    }

    #[test]
    fn gather_scatter_roundtrip_gradients() {
        let table = Value::param(Tensor::from_vec(
            vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0],
            &[3, 2],
        ));
        let picked = table.gather_rows(&[2, 0, 2]);
        assert_eq!(picked.data().data(), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        let loss = picked.sum_all();
        backward(&loss);
        assert_eq!(table.grad_or_zeros().data(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }

    #[test]
    fn scatter_rows_places_fill_and_routes_gradients() {
        let src = Value::param(Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]));
        let fill = Value::param(Tensor::from_vec(vec![9.0, 9.0], &[2]));
        // rows 0 and 2 come from src, row 1 is masked
        let out = src.scatter_rows(&[0, 2], &[1], &fill);
        assert_eq!(out.data().data(), &[1.0, 2.0, 9.0, 9.0, 3.0, 4.0]);
        let weights = Value::constant(Tensor::from_vec(vec![1.0, 1.0, 10.0, 10.0, 100.0, 100.0], &[3, 2]));
        backward(&out.mul(&weights).sum_all());
        assert_eq!(src.grad_or_zeros().data(), &[1.0, 1.0, 100.0, 100.0]);
        assert_eq!(fill.grad_or_zeros().data(), &[10.0, 10.0]);
    }

    #[test]
    fn pairwise_dist_gradcheck() {
        let x = Value::param(Tensor::from_vec(
            vec![0.0, 0.0, 0.0, 1.0, 0.2, -0.3, -0.5, 1.1, 0.8],
            &[3, 3],
        ));
        let err = finite_diff_check(|| x.pairwise_dist().sum_all(), &x, 1e-6);
        assert!(err < 1e-7, "rel err {err}");
    }

    #[test]
    fn softmax_rows_sum_to_one_and_gradcheck() {
        let x = Value::param(Tensor::from_vec(vec![0.1, 2.0, -1.0, 0.0, 0.5, 0.4], &[2, 3]));
        let s = x.softmax_last();
        for o in 0..2 {
            let sum: f64 = s.data().data()[o * 3..(o + 1) * 3].iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
        let w = Value::constant(Tensor::from_vec(vec![1.0, -2.0, 0.5, 3.0, 0.0, 1.0], &[2, 3]));
        let err = finite_diff_check(|| x.softmax_last().mul(&w).sum_all(), &x, 1e-6);
        assert!(err < 1e-7, "rel err {err}");
    }

    #[test]
    fn layer_norm_gradcheck() {
        let x = Value::param(Tensor::from_vec(
            vec![0.3, -0.9, 1.7, 0.2, 0.0, 2.5, -1.1, 0.4],
            &[2, 4],
        ));
        let w = Value::constant(Tensor::from_vec(
            vec![1.0, 2.0, -1.0, 0.5, -0.3, 1.5, 0.7, -2.0],
            &[2, 4],
        ));
        let err = finite_diff_check(|| x.layer_norm_rows(1e-6).mul(&w).sum_all(), &x, 1e-6);
        assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn cross_entropy_gradcheck() {
        let x = Value::param(Tensor::from_vec(vec![0.2, -0.4, 1.1, 0.8, 0.0, -1.3], &[2, 3]));
        let err = finite_diff_check(|| x.softmax_cross_entropy(&[2, 0]), &x, 1e-6);
        assert!(err < 1e-7, "rel err {err}");
    }

    #[test]
    fn unreachable_parameter_gets_no_gradient() {
        let x = Value::param(Tensor::scalar(3.0));
        let y = Value::param(Tensor::scalar(4.0));
        let loss = x.square().sum_all();
        backward(&loss);
        assert!(y.grad().is_none());
        assert_eq!(y.grad_or_zeros().data(), &[0.0]);
    }
}
