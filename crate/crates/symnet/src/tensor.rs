//! Dense row-major matrices and the primitive forward math used
//! everywhere else: affine maps, batch normalization statistics,
//! activations, and row distances. Vectors are 1 x d matrices.
//!
//! Everything is generic over [`Scalar`] so the training path can run in
//! f32 while gradient checking runs the identical code in f64.

use num_traits::{Float, NumAssign};

/// Floating-point scalar usable by the math kernels.
pub trait Scalar:
    Float + NumAssign + std::iter::Sum + std::fmt::Debug + Default + Send + Sync + 'static
{
    fn lit(v: f64) -> Self {
        Self::from(v).expect("literal representable in scalar type")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Mat<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, v: T) -> Self {
        Mat {
            rows,
            cols,
            data: vec![v; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), rows * cols, "data length must be rows*cols");
        Mat { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Mat {
            rows: r,
            cols: c,
            data,
        }
    }

    /// Single-row matrix from a slice (the vector convention).
    pub fn row_vec(v: &[T]) -> Self {
        Mat {
            rows: 1,
            cols: v.len(),
            data: v.to_vec(),
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::one();
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn at(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Reinterprets the buffer with a new shape; element count must match.
    pub fn reshaped(&self, rows: usize, cols: usize) -> Self {
        assert_eq!(rows * cols, self.data.len(), "reshape must preserve size");
        Mat {
            rows,
            cols,
            data: self.data.clone(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Index of the first non-finite row, if any.
    pub fn first_non_finite_row(&self) -> Option<usize> {
        (0..self.rows).find(|&r| self.row(r).iter().any(|v| !v.is_finite()))
    }

    /// Stacks the given matrices vertically; all must share a column count.
    pub fn vcat(parts: &[&Mat<T>]) -> Self {
        assert!(!parts.is_empty());
        let cols = parts[0].cols;
        let rows: usize = parts.iter().map(|m| m.rows).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for m in parts {
            assert_eq!(m.cols, cols, "vcat column mismatch");
            data.extend_from_slice(&m.data);
        }
        Mat { rows, cols, data }
    }

    /// Casts every entry into another scalar type.
    pub fn cast<U: Scalar>(&self) -> Mat<U> {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .map(|&v| U::lit(v.to_f64().expect("finite cast")))
                .collect(),
        }
    }
}

/// `y = x * w^T + b` for `x: R x in`, `w: out x in`, `b: 1 x out`.
pub fn affine<T: Scalar>(x: &Mat<T>, w: &Mat<T>, b: &Mat<T>) -> Mat<T> {
    assert_eq!(x.cols, w.cols, "affine input dim");
    assert_eq!(b.cols, w.rows, "affine bias dim");
    let mut y = Mat::zeros(x.rows, w.rows);
    for r in 0..x.rows {
        let xr = x.row(r);
        let yr = y.row_mut(r);
        yr.copy_from_slice(b.row(0));
        for (o, yo) in yr.iter_mut().enumerate() {
            let wr = w.row(o);
            let mut acc = T::zero();
            for k in 0..xr.len() {
                acc += xr[k] * wr[k];
            }
            *yo += acc;
        }
    }
    y
}

/// Gradients of [`affine`]: returns `(dx, dw, db)` given upstream `dy`.
pub fn affine_backward<T: Scalar>(x: &Mat<T>, w: &Mat<T>, dy: &Mat<T>) -> (Mat<T>, Mat<T>, Mat<T>) {
    let mut dx = Mat::zeros(x.rows, x.cols);
    let mut dw = Mat::zeros(w.rows, w.cols);
    let mut db = Mat::zeros(1, w.rows);
    for r in 0..x.rows {
        let xr = x.row(r);
        let dxr = dx.row_mut(r);
        for (o, &g) in dy.row(r).iter().enumerate() {
            db.data[o] += g;
            let wr = w.row(o);
            let dwr = dw.row_mut(o);
            for k in 0..xr.len() {
                dxr[k] += g * wr[k];
                dwr[k] += g * xr[k];
            }
        }
    }
    (dx, dw, db)
}

pub fn relu<T: Scalar>(x: &Mat<T>) -> Mat<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn sigmoid<T: Scalar>(x: &Mat<T>) -> Mat<T> {
    x.map(sigmoid_scalar)
}

pub fn sigmoid_scalar<T: Scalar>(v: T) -> T {
    // Split on sign so exp never overflows.
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Row-wise softmax, computed max-shifted for stability.
pub fn softmax_rows<T: Scalar>(x: &Mat<T>) -> Mat<T> {
    let mut y = x.clone();
    for r in 0..y.rows {
        let row = y.row_mut(r);
        let m = row.iter().cloned().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    y
}

/// Per-row cross-entropy of softmax(logits) against integer labels.
/// Returns (losses R x 1, probabilities R x C).
pub fn softmax_cross_entropy<T: Scalar>(logits: &Mat<T>, labels: &[usize]) -> (Mat<T>, Mat<T>) {
    assert_eq!(logits.rows, labels.len(), "one label per row");
    let probs = softmax_rows(logits);
    let mut losses = Mat::zeros(logits.rows, 1);
    for r in 0..logits.rows {
        let row = logits.row(r);
        let m = row.iter().cloned().fold(T::neg_infinity(), T::max);
        let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
        losses.data[r] = lse - row[labels[r]];
    }
    (losses, probs)
}

/// Batch statistics for train-mode normalization: per-column mean and
/// population (biased) variance.
pub fn batch_mean_var<T: Scalar>(x: &Mat<T>) -> (Vec<T>, Vec<T>) {
    let n = T::lit(x.rows as f64);
    let mut mean = vec![T::zero(); x.cols];
    for r in 0..x.rows {
        for (c, m) in mean.iter_mut().enumerate() {
            *m += x.at(r, c);
        }
    }
    for m in mean.iter_mut() {
        *m /= n;
    }
    let mut var = vec![T::zero(); x.cols];
    for r in 0..x.rows {
        for (c, v) in var.iter_mut().enumerate() {
            let d = x.at(r, c) - mean[c];
            *v += d * d;
        }
    }
    for v in var.iter_mut() {
        *v /= n;
    }
    (mean, var)
}

/// Normalizes with the given statistics and applies scale/shift.
/// Returns (y, xhat, inv_std).
pub fn bn_apply<T: Scalar>(
    x: &Mat<T>,
    mean: &[T],
    var: &[T],
    gamma: &Mat<T>,
    beta: &Mat<T>,
    eps: T,
) -> (Mat<T>, Mat<T>, Vec<T>) {
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = Mat::zeros(x.rows, x.cols);
    let mut y = Mat::zeros(x.rows, x.cols);
    for r in 0..x.rows {
        for c in 0..x.cols {
            let h = (x.at(r, c) - mean[c]) * inv_std[c];
            xhat.set(r, c, h);
            y.set(r, c, gamma.data[c] * h + beta.data[c]);
        }
    }
    (y, xhat, inv_std)
}

/// Euclidean distance between two equal-length slices.
pub fn l2_distance_slices<T: Scalar>(u: &[T], v: &[T]) -> T {
    debug_assert_eq!(u.len(), v.len());
    u.iter()
        .zip(v)
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum::<T>()
        .sqrt()
}

/// Per-row L2 norm of a matrix, as an R x 1 column.
pub fn row_l2<T: Scalar>(x: &Mat<T>) -> Mat<T> {
    let mut out = Mat::zeros(x.rows, 1);
    for r in 0..x.rows {
        out.data[r] = x.row(r).iter().map(|&v| v * v).sum::<T>().sqrt();
    }
    out
}

/// Per-row L1 norm of a matrix, as an R x 1 column.
pub fn row_l1<T: Scalar>(x: &Mat<T>) -> Mat<T> {
    let mut out = Mat::zeros(x.rows, 1);
    for r in 0..x.rows {
        out.data[r] = x.row(r).iter().map(|&v| v.abs()).sum::<T>();
    }
    out
}

/// Per-row dot product of two equal-shape matrices, as an R x 1 column.
pub fn row_dot<T: Scalar>(a: &Mat<T>, b: &Mat<T>) -> Mat<T> {
    assert_eq!((a.rows, a.cols), (b.rows, b.cols));
    let mut out = Mat::zeros(a.rows, 1);
    for r in 0..a.rows {
        out.data[r] = a.row(r).iter().zip(b.row(r)).map(|(&x, &y)| x * y).sum();
    }
    out
}
