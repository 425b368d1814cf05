//! Dense row-major `f64` matrices and the pure kernels the tape builds on.
//!
//! Every reduction runs sequentially in index order, so equal inputs always
//! produce bitwise-equal outputs.

use std::fmt;

use super::NumError;

#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix({}x{}) [", self.rows, self.cols)?;
        for r in 0..self.rows.min(8) {
            if r > 0 {
                write!(f, "; ")?;
            }
            write!(f, "{:?}", &self.row(r)[..self.cols.min(8)])?;
        }
        if self.rows > 8 {
            write!(f, "; ...")?;
        }
        write!(f, "]")
    }
}

pub(crate) fn check_finite(op: &'static str, data: &[f64]) -> Result<(), NumError> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(NumError::NonFinite { op })
    }
}

impl Matrix {
    /// Builds a matrix from row-major data, rejecting a length mismatch or
    /// any non-finite entry.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, NumError> {
        if data.len() != rows * cols {
            return Err(NumError::DataLength {
                rows,
                cols,
                len: data.len(),
            });
        }
        check_finite("Matrix::new", &data)?;
        Ok(Self { rows, cols, data })
    }

    /// Internal constructor for kernel outputs whose shape is correct by
    /// construction. Finiteness is checked by the caller.
    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::from_raw(rows, cols, vec![0.0; rows * cols])
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self::from_raw(rows, cols, vec![value; rows * cols])
    }

    /// A `1 x n` matrix.
    pub fn row_vector(values: &[f64]) -> Result<Self, NumError> {
        Self::new(1, values.len(), values.to_vec())
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, NumError> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(NumError::RaggedRows);
            }
            data.extend_from_slice(row);
        }
        Self::new(rows.len(), cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub(crate) fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    /// Overwrites one row. Used by the trainer to re-seed codewords.
    pub fn set_row(&mut self, r: usize, values: &[f64]) -> Result<(), NumError> {
        if values.len() != self.cols {
            return Err(NumError::Dimension {
                op: "set_row",
                left: self.shape(),
                right: (1, values.len()),
            });
        }
        check_finite("set_row", values)?;
        self.row_mut(r).copy_from_slice(values);
        Ok(())
    }

    fn same_shape(&self, other: &Matrix, op: &'static str) -> Result<(), NumError> {
        if self.shape() != other.shape() {
            return Err(NumError::Dimension {
                op,
                left: self.shape(),
                right: other.shape(),
            });
        }
        Ok(())
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix, NumError> {
        if self.cols != other.rows {
            return Err(NumError::Dimension {
                op: "matmul",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let (m, k, n) = (self.rows, self.cols, other.cols);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let out_row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let a = self.data[i * k + p];
                let b_row = &other.data[p * n..(p + 1) * n];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        check_finite("matmul", &out)?;
        Ok(Matrix::from_raw(m, n, out))
    }

    /// `self · otherᵀ`.
    pub fn matmul_nt(&self, other: &Matrix) -> Result<Matrix, NumError> {
        if self.cols != other.cols {
            return Err(NumError::Dimension {
                op: "matmul_nt",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let (m, n) = (self.rows, other.rows);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let a = self.row(i);
            for j in 0..n {
                out[i * n + j] = dot(a, other.row(j));
            }
        }
        check_finite("matmul_nt", &out)?;
        Ok(Matrix::from_raw(m, n, out))
    }

    /// `selfᵀ · other`.
    pub fn matmul_tn(&self, other: &Matrix) -> Result<Matrix, NumError> {
        if self.rows != other.rows {
            return Err(NumError::Dimension {
                op: "matmul_tn",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let (m, n) = (self.cols, other.cols);
        let mut out = vec![0.0; m * n];
        for p in 0..self.rows {
            let a_row = self.row(p);
            let b_row = other.row(p);
            for (i, &a) in a_row.iter().enumerate() {
                let out_row = &mut out[i * n..(i + 1) * n];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        check_finite("matmul_tn", &out)?;
        Ok(Matrix::from_raw(m, n, out))
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix, NumError> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix, NumError> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Matrix) -> Result<Matrix, NumError> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    fn zip_with(
        &self,
        other: &Matrix,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Matrix, NumError> {
        self.same_shape(other, op)?;
        let data: Vec<f64> = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        check_finite(op, &data)?;
        Ok(Matrix::from_raw(self.rows, self.cols, data))
    }

    pub fn map(&self, op: &'static str, f: impl Fn(f64) -> f64) -> Result<Matrix, NumError> {
        let data: Vec<f64> = self.data.iter().map(|&v| f(v)).collect();
        check_finite(op, &data)?;
        Ok(Matrix::from_raw(self.rows, self.cols, data))
    }

    pub fn scale(&self, s: f64) -> Result<Matrix, NumError> {
        self.map("scale", |v| v * s)
    }

    pub(crate) fn add_assign(&mut self, other: &Matrix) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Sum of all entries, in index order.
    pub fn sum(&self) -> f64 {
        self.data.iter().fold(0.0, |acc, &v| acc + v)
    }

    pub fn sum_rows(&self) -> Vec<f64> {
        (0..self.rows).map(|r| self.row(r).iter().fold(0.0, |a, &v| a + v)).collect()
    }

    /// Column means as a `1 x cols` matrix.
    pub fn mean_rows(&self) -> Result<Matrix, NumError> {
        if self.rows == 0 {
            return Err(NumError::Empty { op: "mean_rows" });
        }
        let mut out = vec![0.0; self.cols];
        for r in 0..self.rows {
            for (o, &v) in out.iter_mut().zip(self.row(r)) {
                *o += v;
            }
        }
        let inv = 1.0 / self.rows as f64;
        for o in &mut out {
            *o *= inv;
        }
        Ok(Matrix::from_raw(1, self.cols, out))
    }

    /// Row-wise softmax with per-row max subtraction.
    pub fn softmax_rows(&self) -> Result<Matrix, NumError> {
        check_finite("softmax_rows", &self.data)?;
        let mut out = self.data.clone();
        for r in 0..self.rows {
            let row = &mut out[r * self.cols..(r + 1) * self.cols];
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        Ok(Matrix::from_raw(self.rows, self.cols, out))
    }

    /// Row-wise log-softmax, `x - max - ln Σ exp(x - max)`.
    pub fn log_softmax_rows(&self) -> Result<Matrix, NumError> {
        check_finite("log_softmax_rows", &self.data)?;
        let mut out = self.data.clone();
        for r in 0..self.rows {
            let row = &mut out[r * self.cols..(r + 1) * self.cols];
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let total = row.iter().fold(0.0, |acc, &v| acc + (v - max).exp());
            let log_z = max + total.ln();
            for v in row.iter_mut() {
                *v -= log_z;
            }
        }
        Ok(Matrix::from_raw(self.rows, self.cols, out))
    }

    /// Squared Euclidean distance from every query row to every codeword row.
    pub fn pairwise_sqdist(queries: &Matrix, codewords: &Matrix) -> Result<Matrix, NumError> {
        if queries.cols != codewords.cols {
            return Err(NumError::Dimension {
                op: "pairwise_sqdist",
                left: queries.shape(),
                right: codewords.shape(),
            });
        }
        let (m, n) = (queries.rows, codewords.rows);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let q = queries.row(i);
            for j in 0..n {
                out[i * n + j] = sqdist(q, codewords.row(j));
            }
        }
        check_finite("pairwise_sqdist", &out)?;
        Ok(Matrix::from_raw(m, n, out))
    }

    /// Rows selected by index, in the given order.
    pub fn gather_rows(&self, ids: &[usize]) -> Result<Matrix, NumError> {
        let mut data = Vec::with_capacity(ids.len() * self.cols);
        for &id in ids {
            if id >= self.rows {
                return Err(NumError::Index {
                    op: "gather_rows",
                    index: id,
                    len: self.rows,
                });
            }
            data.extend_from_slice(self.row(id));
        }
        Ok(Matrix::from_raw(ids.len(), self.cols, data))
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn concat_rows(parts: &[&Matrix]) -> Result<Matrix, NumError> {
        let cols = parts.first().map_or(0, |m| m.cols);
        let mut rows = 0;
        let mut data = Vec::new();
        for part in parts {
            if part.cols != cols {
                return Err(NumError::Dimension {
                    op: "concat_rows",
                    left: (rows, cols),
                    right: part.shape(),
                });
            }
            rows += part.rows;
            data.extend_from_slice(&part.data);
        }
        Ok(Matrix::from_raw(rows, cols, data))
    }

    /// Copy as `f32`, the on-disk precision.
    pub fn to_f32(&self) -> Vec<f32> {
        self.data.iter().map(|&v| v as f32).collect()
    }

    pub fn from_f32(rows: usize, cols: usize, data: &[f32]) -> Result<Matrix, NumError> {
        Matrix::new(rows, cols, data.iter().map(|&v| f64::from(v)).collect())
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |acc, (&x, &y)| acc + x * y)
}

pub fn sqdist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |acc, (&x, &y)| {
        let d = x - y;
        acc + d * d
    })
}
