//! Dense real-matrix kernel: multiply, row softmax, LayerNorm, GELU and the
//! Moore-Penrose pseudoinverse (iterative scheme plus a decomposition oracle).
//!
//! All storage is row-major f64. Operations are pure functions of their
//! inputs and deterministic: identical inputs produce bit-identical outputs
//! within one build. Exported operations either return finite matrices or a
//! typed error; nothing non-finite escapes.

pub mod alloc;
pub mod pinv;
pub mod special;

pub use pinv::{pinv_iterative, pinv_oracle};

use crate::error::{Error, Result};

/// Row-major dense matrix of f64 values.
///
/// Invariants: `data.len() == rows * cols`, all entries finite. Construction
/// through `from_vec` enforces both; internal constructors keep them by
/// checking computed results at operation boundaries.
#[derive(Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    fn alloc(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        alloc::on_alloc((data.capacity() * 8) as u64);
        Matrix { rows, cols, data }
    }

    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix buffer length mismatch");
        Self::alloc(rows, cols, data)
    }

    /// Validating constructor: checks length and finiteness.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::LengthMismatch {
                what: "matrix data",
                expected: rows * cols,
                got: data.len(),
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("matrix construction"));
        }
        Ok(Self::alloc(rows, cols, data))
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::alloc(rows, cols, vec![0.0; rows * cols])
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self::alloc(rows, cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// Rows `start..start + len` as a new matrix.
    pub fn slice_rows(&self, start: usize, len: usize) -> Matrix {
        assert!(start + len <= self.rows);
        Matrix::from_raw(
            len,
            self.cols,
            self.data[start * self.cols..(start + len) * self.cols].to_vec(),
        )
    }

    pub fn concat_rows(top: &Matrix, bottom: &Matrix) -> Result<Matrix> {
        if top.cols != bottom.cols {
            return Err(Error::ShapeMismatch {
                op: "concat_rows",
                lhs_rows: top.rows,
                lhs_cols: top.cols,
                rhs_rows: bottom.rows,
                rhs_cols: bottom.cols,
            });
        }
        let mut data = Vec::with_capacity((top.rows + bottom.rows) * top.cols);
        data.extend_from_slice(&top.data);
        data.extend_from_slice(&bottom.data);
        Ok(Matrix::from_raw(top.rows + bottom.rows, top.cols, data))
    }

    pub fn scale(mut self, c: f64) -> Matrix {
        for v in &mut self.data {
            *v *= c;
        }
        self
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::ShapeMismatch {
                op: "add",
                lhs_rows: self.rows,
                lhs_cols: self.cols,
                rhs_rows: other.rows,
                rhs_cols: other.cols,
            });
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Matrix::from_raw(self.rows, self.cols, data))
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::ShapeMismatch {
                op: "sub",
                lhs_rows: self.rows,
                lhs_cols: self.cols,
                rhs_rows: other.rows,
                rhs_cols: other.cols,
            });
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Ok(Matrix::from_raw(self.rows, self.cols, data))
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Maximum absolute column sum.
    pub fn norm_one(&self) -> f64 {
        let mut sums = vec![0.0; self.cols];
        for i in 0..self.rows {
            for (j, v) in self.row(i).iter().enumerate() {
                sums[j] += v.abs();
            }
        }
        sums.iter().fold(0.0, |m: f64, &s| m.max(s))
    }

    /// Maximum absolute row sum.
    pub fn norm_inf(&self) -> f64 {
        (0..self.rows)
            .map(|i| self.row(i).iter().map(|v| v.abs()).sum())
            .fold(0.0, |m: f64, s: f64| m.max(s))
    }
}

impl Clone for Matrix {
    fn clone(&self) -> Self {
        Self::alloc(self.rows, self.cols, self.data.clone())
    }
}

impl Drop for Matrix {
    fn drop(&mut self) {
        alloc::on_free((self.data.capacity() * 8) as u64);
    }
}

/// Relative Frobenius distance `|a - b|_F / |b|_F` (absolute when `b` is 0).
pub fn rel_frobenius(a: &Matrix, b: &Matrix) -> f64 {
    let denom = b.frobenius_norm();
    let diff = a.sub(b).expect("rel_frobenius shape mismatch").frobenius_norm();
    if denom == 0.0 {
        diff
    } else {
        diff / denom
    }
}

fn check_finite(m: Matrix, op: &'static str) -> Result<Matrix> {
    if m.is_finite() {
        Ok(m)
    } else {
        Err(Error::NonFinite(op))
    }
}

/// Standard matrix product `a * b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            lhs_rows: a.rows,
            lhs_cols: a.cols,
            rhs_rows: b.rows,
            rhs_cols: b.cols,
        });
    }
    let mut out = vec![0.0; a.rows * b.cols];
    for i in 0..a.rows {
        let arow = a.row(i);
        let orow = &mut out[i * b.cols..(i + 1) * b.cols];
        for (k, &aik) in arow.iter().enumerate() {
            let brow = b.row(k);
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
    check_finite(Matrix::from_raw(a.rows, b.cols, out), "matmul")
}

#[inline]
fn dot(x: &[f64], y: &[f64]) -> f64 {
    // Four-lane unrolled dot product; fixed summation order keeps it
    // deterministic.
    let n = x.len().min(y.len());
    let chunks = n / 4;
    let (mut s0, mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0, 0.0);
    for c in 0..chunks {
        let i = c * 4;
        s0 += x[i] * y[i];
        s1 += x[i + 1] * y[i + 1];
        s2 += x[i + 2] * y[i + 2];
        s3 += x[i + 3] * y[i + 3];
    }
    let mut s = (s0 + s1) + (s2 + s3);
    for i in chunks * 4..n {
        s += x[i] * y[i];
    }
    s
}

/// `a * b^T`, without materializing the transpose.
pub fn matmul_nt(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(Error::ShapeMismatch {
            op: "matmul_nt",
            lhs_rows: a.rows,
            lhs_cols: a.cols,
            rhs_rows: b.rows,
            rhs_cols: b.cols,
        });
    }
    let mut out = vec![0.0; a.rows * b.rows];
    for i in 0..a.rows {
        let arow = a.row(i);
        let orow = &mut out[i * b.rows..(i + 1) * b.rows];
        for (j, o) in orow.iter_mut().enumerate() {
            *o = dot(arow, b.row(j));
        }
    }
    check_finite(Matrix::from_raw(a.rows, b.rows, out), "matmul_nt")
}

/// `a^T * b`, without materializing the transpose.
pub fn matmul_tn(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows != b.rows {
        return Err(Error::ShapeMismatch {
            op: "matmul_tn",
            lhs_rows: a.rows,
            lhs_cols: a.cols,
            rhs_rows: b.rows,
            rhs_cols: b.cols,
        });
    }
    let mut out = vec![0.0; a.cols * b.cols];
    for k in 0..a.rows {
        let arow = a.row(k);
        let brow = b.row(k);
        for (i, &aki) in arow.iter().enumerate() {
            let orow = &mut out[i * b.cols..(i + 1) * b.cols];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aki * bv;
            }
        }
    }
    check_finite(Matrix::from_raw(a.cols, b.cols, out), "matmul_tn")
}

/// Row-wise softmax of `scale * a`, stabilized by row-max subtraction.
///
/// Consumes its input and reuses the buffer, so the peak working set of a
/// kernel chain stays at one matrix per factor.
pub fn softmax_rows(mut a: Matrix, scale: f64) -> Matrix {
    debug_assert!(scale > 0.0, "softmax scale must be positive");
    for i in 0..a.rows {
        let row = a.row_mut(i);
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = ((*v - max) * scale).exp();
            sum += *v;
        }
        let inv = 1.0 / sum;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
    a
}

/// Per-row standardization to mean 0 / variance 1 (population variance,
/// epsilon inside the square root), followed by the affine map
/// `gamma .* x + beta`.
pub fn layer_norm(mut x: Matrix, gamma: &[f64], beta: &[f64], eps: f64) -> Result<Matrix> {
    if gamma.len() != x.cols {
        return Err(Error::LengthMismatch {
            what: "layer_norm gamma",
            expected: x.cols,
            got: gamma.len(),
        });
    }
    if beta.len() != x.cols {
        return Err(Error::LengthMismatch {
            what: "layer_norm beta",
            expected: x.cols,
            got: beta.len(),
        });
    }
    let d = x.cols as f64;
    for i in 0..x.rows {
        let row = x.row_mut(i);
        let mean = row.iter().sum::<f64>() / d;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
        let inv_std = 1.0 / (var + eps).sqrt();
        for (v, (&g, &b)) in row.iter_mut().zip(gamma.iter().zip(beta)) {
            *v = g * (*v - mean) * inv_std + b;
        }
    }
    Ok(x)
}

/// Elementwise GELU in the exact Gaussian-CDF form `x * Phi(x)`.
pub fn gelu(mut x: Matrix) -> Matrix {
    for v in x.data.iter_mut() {
        *v *= special::norm_cdf(*v);
    }
    x
}

/// Derivative of exact GELU: `Phi(x) + x * phi(x)`.
pub fn gelu_grad(x: f64) -> f64 {
    special::norm_cdf(x) + x * special::norm_pdf(x)
}
