//! Dense row-major `f64` matrices.
//!
//! Everything numeric in this crate (node features, adjacency, attention
//! weights, model parameters) is a [`Tensor`]: a plain 2-D matrix with no
//! strides, views, or broadcasting. Vectors are 1×n or n×1 matrices and a
//! scalar is 1×1. Keeping the representation this small makes the autodiff
//! tape easy to reason about and keeps the hot loops contiguous.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl Tensor {
    /// Builds a matrix from row-major values. `values.len()` must equal
    /// `rows * cols` and both dimensions must be nonzero.
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Shape(format!(
                "tensor dimensions must be nonzero, got {rows}x{cols}"
            )));
        }
        if values.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{rows}x{cols} tensor needs {} values, got {}",
                rows * cols,
                values.len()
            )));
        }
        Ok(Tensor { rows, cols, values })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "zero-sized tensor");
        Tensor {
            rows,
            cols,
            values: vec![0.0; rows * cols],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            rows: 1,
            cols: 1,
            values: vec![v],
        }
    }

    /// 1×n row vector.
    pub fn row_vector(values: Vec<f64>) -> Result<Self> {
        let n = values.len();
        Tensor::new(1, n, values)
    }

    /// n×1 column vector.
    pub fn column_vector(values: Vec<f64>) -> Result<Self> {
        let n = values.len();
        Tensor::new(n, 1, values)
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Shape("no rows given".into()));
        }
        let cols = rows[0].len();
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::Shape(format!(
                    "row {i} has {} columns, expected {cols}",
                    r.len()
                )));
            }
        }
        let mut values = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            values.extend_from_slice(r);
        }
        Tensor::new(rows.len(), cols, values)
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
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        false // construction forbids zero-sized tensors
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        debug_assert!(r < self.rows && c < self.cols);
        self.values[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        debug_assert!(r < self.rows && c < self.cols);
        self.values[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row_slice(&self, r: usize) -> &[f64] {
        debug_assert!(r < self.rows);
        &self.values[r * self.cols..(r + 1) * self.cols]
    }

    /// True when a tensor is a row or column vector (or a scalar).
    pub fn is_vector(&self) -> bool {
        self.rows == 1 || self.cols == 1
    }

    /// The single value of a 1×1 tensor.
    pub fn scalar_value(&self) -> Result<f64> {
        if self.rows == 1 && self.cols == 1 {
            Ok(self.values[0])
        } else {
            Err(Error::Shape(format!(
                "expected scalar, got {}x{}",
                self.rows, self.cols
            )))
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn transposed(&self) -> Tensor {
        let mut out = Tensor::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.values[c * self.rows + r] = self.values[r * self.cols + c];
            }
        }
        out
    }

    /// Largest absolute elementwise difference between two same-shaped tensors.
    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "cannot compare {}x{} with {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }
}

/// `out = a @ b` for row-major matrices, accumulating over the inner
/// dimension in the middle loop so the innermost loop streams both `b` and
/// `out` rows contiguously.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.cols != b.rows {
        return Err(Error::Shape(format!(
            "matmul {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut out = Tensor::zeros(m, n);
    for i in 0..m {
        let a_row = &a.values[i * k..(i + 1) * k];
        let out_row = &mut out.values[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            if a_ip == 0.0 {
                continue;
            }
            let b_row = &b.values[p * n..(p + 1) * n];
            for (o, &b_pn) in out_row.iter_mut().zip(b_row) {
                *o += a_ip * b_pn;
            }
        }
    }
    Ok(out)
}
