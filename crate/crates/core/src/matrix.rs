//! Dense row-major f64 matrices.
//!
//! Column vectors are matrices with `cols == 1`. All heavy kernels
//! (`matmul`, `matmul_abt`, `matmul_atb`) iterate in row-major
//! streaming order so the sweep harness stays fast on plain scalar
//! code.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(
            rows * cols,
            data.len(),
            "matrix data length {} does not match {}x{}",
            data.len(),
            rows,
            cols
        );
        Matrix { rows, cols, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix { rows, cols, data }
    }

    pub fn column(values: &[f64]) -> Self {
        Matrix::from_vec(values.len(), 1, values.to_vec())
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

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0)
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

    /// `self * b`, shapes (m,k)x(k,n).
    pub fn matmul(&self, b: &Matrix) -> Result<Matrix> {
        if self.cols != b.rows {
            return Err(Error::dim("matmul", self.shape(), b.shape()));
        }
        let (m, k, n) = (self.rows, self.cols, b.cols);
        let mut out = Matrix::zeros(m, n);
        for i in 0..m {
            let arow = &self.data[i * k..(i + 1) * k];
            let orow = &mut out.data[i * n..(i + 1) * n];
            for (p, &a) in arow.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let brow = &b.data[p * n..(p + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += a * bv;
                }
            }
        }
        Ok(out)
    }

    /// `self * b^T`, shapes (m,k)x(n,k) -> (m,n). Row-dot-row, fully sequential.
    pub fn matmul_abt(&self, b: &Matrix) -> Result<Matrix> {
        if self.cols != b.cols {
            return Err(Error::dim("matmul_abt", self.shape(), b.shape()));
        }
        let (m, k, n) = (self.rows, self.cols, b.rows);
        let mut out = Matrix::zeros(m, n);
        for i in 0..m {
            let arow = &self.data[i * k..(i + 1) * k];
            for j in 0..n {
                let brow = &b.data[j * k..(j + 1) * k];
                let mut acc = 0.0;
                for (&a, &bv) in arow.iter().zip(brow) {
                    acc += a * bv;
                }
                out.data[i * n + j] = acc;
            }
        }
        Ok(out)
    }

    /// `self^T * b`, shapes (k,m)x(k,n) -> (m,n). Streams rows of both inputs.
    pub fn matmul_atb(&self, b: &Matrix) -> Result<Matrix> {
        if self.rows != b.rows {
            return Err(Error::dim("matmul_atb", self.shape(), b.shape()));
        }
        let (k, m, n) = (self.rows, self.cols, b.cols);
        let mut out = Matrix::zeros(m, n);
        for p in 0..k {
            let arow = &self.data[p * m..(p + 1) * m];
            let brow = &b.data[p * n..(p + 1) * n];
            for (i, &a) in arow.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let orow = &mut out.data[i * n..(i + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += a * bv;
                }
            }
        }
        Ok(out)
    }

    pub fn add(&self, b: &Matrix) -> Result<Matrix> {
        self.zip_with("add", b, |x, y| x + y)
    }

    pub fn sub(&self, b: &Matrix) -> Result<Matrix> {
        self.zip_with("sub", b, |x, y| x - y)
    }

    pub fn hadamard(&self, b: &Matrix) -> Result<Matrix> {
        self.zip_with("hadamard", b, |x, y| x * y)
    }

    fn zip_with(
        &self,
        op: &'static str,
        b: &Matrix,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Matrix> {
        if self.shape() != b.shape() {
            return Err(Error::dim(op, self.shape(), b.shape()));
        }
        let data = self
            .data
            .iter()
            .zip(&b.data)
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn scale(&self, c: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| x * c).collect(),
        }
    }

    pub fn add_assign(&mut self, b: &Matrix) {
        assert_eq!(self.shape(), b.shape(), "add_assign shape mismatch");
        for (x, &y) in self.data.iter_mut().zip(&b.data) {
            *x += y;
        }
    }

    pub fn frob_sq(&self) -> f64 {
        self.data.iter().map(|&x| x * x).sum()
    }

    pub fn frob(&self) -> f64 {
        self.frob_sq().sqrt()
    }

    /// Euclidean norm of column `j`.
    pub fn col_norm(&self, j: usize) -> f64 {
        let mut acc = 0.0;
        for i in 0..self.rows {
            let v = self.data[i * self.cols + j];
            acc += v * v;
        }
        acc.sqrt()
    }

    /// Reinterprets the row-major buffer under a new shape.
    pub fn reshape(&self, rows: usize, cols: usize) -> Result<Matrix> {
        if rows * cols != self.data.len() {
            return Err(Error::dim("reshape", self.shape(), (rows, cols)));
        }
        Ok(Matrix {
            rows,
            cols,
            data: self.data.clone(),
        })
    }
}
