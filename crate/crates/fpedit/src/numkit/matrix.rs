//! Row-major dense f64 matrix.
//!
//! The layout is the crate's interchange contract: `data[r * cols + c]`
//! holds entry (r, c), and the same ordering is what the FPMX file
//! format serializes. Matrices with zero rows or columns are legal and
//! show up in practice (an edit state that has not accumulated keys yet).

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Build from a row-major buffer. Rejects a length mismatch.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Matrix> {
        if data.len() != rows * cols {
            return Err(Error::invalid(format!(
                "matrix buffer has {} entries, expected {}x{}={}",
                data.len(),
                rows,
                cols,
                rows * cols
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Matrix {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Matrix {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// 1 x n matrix from a slice.
    pub fn row_vector(v: &[f64]) -> Matrix {
        Matrix { rows: 1, cols: v.len(), data: v.to_vec() }
    }

    /// n x 1 matrix from a slice.
    pub fn col_vector(v: &[f64]) -> Matrix {
        Matrix { rows: v.len(), cols: 1, data: v.to_vec() }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Matrix {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Matrix { rows, cols, data }
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn col(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    /// Append one column on the right. Used to grow key caches.
    pub fn append_col(&mut self, col: &[f64]) -> Result<()> {
        if col.len() != self.rows {
            return Err(Error::invalid(format!(
                "appended column has {} entries, matrix has {} rows",
                col.len(),
                self.rows
            )));
        }
        let mut data = Vec::with_capacity(self.rows * (self.cols + 1));
        for r in 0..self.rows {
            data.extend_from_slice(self.row(r));
            data.push(col[r]);
        }
        self.cols += 1;
        self.data = data;
        Ok(())
    }

    /// Matrix product, fixed i-k-j loop order. The inner accumulation
    /// runs over k in ascending order for every output entry, which pins
    /// the floating-point result independent of build flags.
    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.rows {
            return Err(Error::invalid(format!(
                "matmul shape mismatch: {}x{} * {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let (m, kk, n) = (self.rows, self.cols, rhs.cols);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = &self.data[i * kk..(i + 1) * kk];
            let orow = &mut out[i * n..(i + 1) * n];
            for (k, &a) in arow.iter().enumerate() {
                let brow = &rhs.data[k * n..(k + 1) * n];
                for (o, &b) in orow.iter_mut().zip(brow.iter()) {
                    *o += a * b;
                }
            }
        }
        Ok(Matrix { rows: m, cols: n, data: out })
    }

    /// self * v for a plain vector, ascending-index accumulation.
    pub fn mul_vec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.cols {
            return Err(Error::invalid(format!(
                "mul_vec shape mismatch: {}x{} * len {}",
                self.rows,
                self.cols,
                v.len()
            )));
        }
        let mut out = vec![0.0; self.rows];
        for r in 0..self.rows {
            let mut acc = 0.0;
            for (a, b) in self.row(r).iter().zip(v.iter()) {
                acc += a * b;
            }
            out[r] = acc;
        }
        Ok(out)
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

    pub fn add(&self, rhs: &Matrix) -> Result<Matrix> {
        self.zip_with(rhs, |a, b| a + b, "add")
    }

    pub fn sub(&self, rhs: &Matrix) -> Result<Matrix> {
        self.zip_with(rhs, |a, b| a - b, "sub")
    }

    fn zip_with(&self, rhs: &Matrix, f: impl Fn(f64, f64) -> f64, what: &str) -> Result<Matrix> {
        if self.shape() != rhs.shape() {
            return Err(Error::invalid(format!(
                "{} shape mismatch: {}x{} vs {}x{}",
                what, self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let data = self.data.iter().zip(rhs.data.iter()).map(|(&a, &b)| f(a, b)).collect();
        Ok(Matrix { rows: self.rows, cols: self.cols, data })
    }

    pub fn scale(&self, c: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| x * c).collect(),
        }
    }

    /// self += alpha * rhs, in place. The SGD update and the closed-form
    /// weight edit both land here.
    pub fn axpy(&mut self, alpha: f64, rhs: &Matrix) -> Result<()> {
        if self.shape() != rhs.shape() {
            return Err(Error::invalid(format!(
                "axpy shape mismatch: {}x{} vs {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        for (a, &b) in self.data.iter_mut().zip(rhs.data.iter()) {
            *a += alpha * b;
        }
        Ok(())
    }

    /// Outer product u v^T.
    pub fn outer(u: &[f64], v: &[f64]) -> Matrix {
        let mut m = Matrix::zeros(u.len(), v.len());
        for (r, &a) in u.iter().enumerate() {
            for (c, &b) in v.iter().enumerate() {
                m.data[r * v.len() + c] = a * b;
            }
        }
        m
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|&x| x * x).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, &x| m.max(x.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Relative Frobenius distance, with an absolute fallback when the
    /// reference is zero. Handy in tests and invariant checks.
    pub fn rel_frobenius_distance(&self, other: &Matrix) -> f64 {
        let denom = other.frobenius_norm();
        let diff = match self.sub(other) {
            Ok(d) => d.frobenius_norm(),
            Err(_) => return f64::INFINITY,
        };
        if denom > 0.0 {
            diff / denom
        } else {
            diff
        }
    }
}

/// Standard normal sample via Box–Muller, driven by any RNG. Kept here so
/// parameter init and tests share one definition.
pub fn randn(rng: &mut impl rand::Rng) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>(); // (0, 1], keeps ln finite
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Matrix with iid N(0, std^2) entries, filled row by row.
pub fn randn_matrix(rows: usize, cols: usize, std: f64, rng: &mut impl rand::Rng) -> Matrix {
    let mut m = Matrix::zeros(rows, cols);
    for v in m.data_mut() {
        *v = randn(rng) * std;
    }
    m
}
