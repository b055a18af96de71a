//! Dense row-major f64 arrays with shape metadata.
//!
//! This is the raw storage layer under [`crate::autodiff::Value`]. All
//! reductions over an axis sum their terms in sorted order (by
//! `f64::total_cmp`), so a reduction over atoms yields bit-identical
//! results no matter how the atoms were indexed. That property is what
//! lets the encoders promise bit-exact permutation equivariance.

use std::fmt;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    data: Vec<f64>,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ShapeError {
    /// Inner dimensions of a matrix product disagree.
    MatMul { lhs: Vec<usize>, rhs: Vec<usize> },
    /// Two shapes cannot be broadcast together.
    Broadcast { lhs: Vec<usize>, rhs: Vec<usize> },
}

impl fmt::Display for ShapeError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::MatMul { lhs, rhs } => {
                write!(f, "matmul dimension mismatch: {lhs:?} x {rhs:?}")
            }
            Self::Broadcast { lhs, rhs } => {
                write!(f, "shapes {lhs:?} and {rhs:?} do not broadcast")
            }
        }
    }
}

impl std::error::Error for ShapeError {}

/// Sum of a slice in value-sorted order. The result depends only on the
/// multiset of terms, never on their arrangement.
pub fn ordered_sum(terms: &mut [f64]) -> f64 {
    terms.sort_unstable_by(|a, b| a.total_cmp(b));
    terms.iter().sum()
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            data: vec![0.0; n],
            shape: shape.to_vec(),
        }
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            data: vec![v; n],
            shape: shape.to_vec(),
        }
    }

    pub fn from_vec(data: Vec<f64>, shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        assert_eq!(data.len(), n, "data length {} != shape {:?}", data.len(), shape);
        Tensor {
            data,
            shape: shape.to_vec(),
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            data: vec![v],
            shape: vec![1],
        }
    }

    /// Identity matrix.
    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn scalar_value(&self) -> f64 {
        assert!(self.is_scalar(), "tensor of shape {:?} is not a scalar", self.shape);
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Row-major element at a 2-D index.
    pub fn at2(&self, i: usize, j: usize) -> f64 {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[i * self.shape[1] + j]
    }

    pub fn at3(&self, i: usize, j: usize, k: usize) -> f64 {
        debug_assert_eq!(self.shape.len(), 3);
        self.data[(i * self.shape[1] + j) * self.shape[2] + k]
    }

    pub fn reshaped(&self, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        assert_eq!(n, self.data.len(), "cannot reshape {:?} into {:?}", self.shape, shape);
        Tensor {
            data: self.data.clone(),
            shape: shape.to_vec(),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            data: self.data.iter().map(|&v| f(v)).collect(),
            shape: self.shape.clone(),
        }
    }

    pub fn zip(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        assert_eq!(self.shape, other.shape, "zip shape mismatch {:?} vs {:?}", self.shape, other.shape);
        Tensor {
            data: self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
            shape: self.shape.clone(),
        }
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|v| v * c)
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += b;
        }
    }

    /// 2-D matrix product.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor, ShapeError> {
        if self.shape.len() != 2 || other.shape.len() != 2 || self.shape[1] != other.shape[0] {
            return Err(ShapeError::MatMul {
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let (m, k) = (self.shape[0], self.shape[1]);
        let n = other.shape[1];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = &self.data[i * k..(i + 1) * k];
            let orow = &mut out[i * n..(i + 1) * n];
            for (p, &a) in arow.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let brow = &other.data[p * n..(p + 1) * n];
                for (o, &b) in orow.iter_mut().zip(brow.iter()) {
                    *o += a * b;
                }
            }
        }
        Ok(Tensor::from_vec(out, &[m, n]))
    }

    pub fn transpose2(&self) -> Tensor {
        assert_eq!(self.shape.len(), 2, "transpose2 needs a matrix");
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor::from_vec(out, &[n, m])
    }

    /// Broadcast result shape under right-aligned numpy rules.
    pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>, ShapeError> {
        let rank = a.len().max(b.len());
        let mut out = vec![0usize; rank];
        for i in 0..rank {
            let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
            let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
            if da == db || da == 1 || db == 1 {
                out[i] = da.max(db);
            } else {
                return Err(ShapeError::Broadcast {
                    lhs: a.to_vec(),
                    rhs: b.to_vec(),
                });
            }
        }
        Ok(out)
    }

    /// Strides of `shape` when viewed inside the broadcast `out_shape`;
    /// broadcast axes get stride 0.
    fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
        let rank = out_shape.len();
        let offset = rank - shape.len();
        let mut native = vec![0usize; shape.len()];
        let mut acc = 1usize;
        for i in (0..shape.len()).rev() {
            native[i] = acc;
            acc *= shape[i];
        }
        let mut strides = vec![0usize; rank];
        for i in 0..rank {
            if i >= offset && shape[i - offset] != 1 {
                strides[i] = native[i - offset];
            }
        }
        strides
    }

    /// Elementwise binary op with broadcasting.
    pub fn broadcast_zip(
        &self,
        other: &Tensor,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor, ShapeError> {
        if self.shape == other.shape {
            return Ok(self.zip(other, f));
        }
        let out_shape = Self::broadcast_shape(&self.shape, &other.shape)?;
        let sa = Self::broadcast_strides(&self.shape, &out_shape);
        let sb = Self::broadcast_strides(&other.shape, &out_shape);
        let total: usize = out_shape.iter().product();
        let mut out = vec![0.0; total];
        let rank = out_shape.len();
        let mut idx = vec![0usize; rank];
        let (mut off_a, mut off_b) = (0usize, 0usize);
        for slot in out.iter_mut() {
            *slot = f(self.data[off_a], other.data[off_b]);
            // odometer increment
            for ax in (0..rank).rev() {
                idx[ax] += 1;
                off_a += sa[ax];
                off_b += sb[ax];
                if idx[ax] < out_shape[ax] {
                    break;
                }
                off_a -= sa[ax] * out_shape[ax];
                off_b -= sb[ax] * out_shape[ax];
                idx[ax] = 0;
            }
        }
        Ok(Tensor::from_vec(out, &out_shape))
    }

    /// Reduce a broadcast gradient back onto `target_shape` by summing over
    /// the expanded axes. Used by the backward pass of broadcast ops.
    pub fn reduce_to_shape(&self, target_shape: &[usize]) -> Tensor {
        if self.shape == target_shape {
            return self.clone();
        }
        let rank = self.shape.len();
        let offset = rank - target_shape.len();
        let strides = Self::broadcast_strides(target_shape, &self.shape);
        let target_len: usize = target_shape.iter().product();
        // gather terms per target slot, then sum each slot in sorted order
        let mut buckets: Vec<Vec<f64>> = vec![Vec::new(); target_len];
        let mut idx = vec![0usize; rank];
        let mut off_t = 0usize;
        for &v in &self.data {
            buckets[off_t].push(v);
            for ax in (0..rank).rev() {
                idx[ax] += 1;
                off_t += strides[ax];
                if idx[ax] < self.shape[ax] {
                    break;
                }
                off_t -= strides[ax] * self.shape[ax];
                idx[ax] = 0;
            }
        }
        let _ = offset;
        let data = buckets.iter_mut().map(|b| ordered_sum(b)).collect();
        Tensor::from_vec(data, target_shape)
    }

    /// Sum over one axis, order-invariant.
    pub fn sum_axis(&self, axis: usize) -> Tensor {
        assert!(axis < self.shape.len());
        let mut out_shape = self.shape.clone();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let outer: usize = self.shape[..axis].iter().product();
        let mid = self.shape[axis];
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut out = vec![0.0; outer * inner];
        let mut terms = vec![0.0; mid];
        for o in 0..outer {
            for i in 0..inner {
                for (m, t) in terms.iter_mut().enumerate() {
                    *t = self.data[(o * mid + m) * inner + i];
                }
                out[o * inner + i] = ordered_sum(&mut terms);
            }
        }
        Tensor::from_vec(out, &out_shape)
    }

    /// Scalar sum of every element, order-invariant.
    pub fn sum_all(&self) -> f64 {
        let mut terms = self.data.clone();
        ordered_sum(&mut terms)
    }
}
