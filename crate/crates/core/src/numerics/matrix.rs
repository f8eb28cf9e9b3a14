use super::vector::dot;
use super::{NumericsError, Vector};

/// Dense real matrix in column-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Checked constructor from column-major data.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, NumericsError> {
        if data.len() != rows * cols {
            return Err(NumericsError::DimensionMismatch {
                expected: rows * cols,
                found: data.len(),
            });
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(NumericsError::NonFinite(pos));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        let mut m = Self::zeros(diag.len(), diag.len());
        for (i, d) in diag.iter().enumerate() {
            m.set(i, i, *d);
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for j in 0..cols {
            for i in 0..rows {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    /// Build from row slices; all rows must share a length.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self, NumericsError> {
        let cols = rows.first().map_or(0, |r| r.len());
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(NumericsError::DimensionMismatch {
                expected: cols,
                found: bad.len(),
            });
        }
        let m = Self::from_fn(rows.len(), cols, |i, j| rows[i][j]);
        Self::new(m.rows, m.cols, m.data)
    }

    /// Build from equally sized columns.
    pub fn from_columns(columns: &[&[f64]]) -> Result<Self, NumericsError> {
        let rows = columns.first().map_or(0, |c| c.len());
        let mut data = Vec::with_capacity(rows * columns.len());
        for c in columns {
            if c.len() != rows {
                return Err(NumericsError::DimensionMismatch {
                    expected: rows,
                    found: c.len(),
                });
            }
            data.extend_from_slice(c);
        }
        Self::new(rows, columns.len(), data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    /// Column-major storage.
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[j * self.rows + i]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[j * self.rows + i] = v;
    }

    #[inline]
    pub fn add_to(&mut self, i: usize, j: usize, v: f64) {
        self.data[j * self.rows + i] += v;
    }

    pub fn col(&self, j: usize) -> &[f64] {
        &self.data[j * self.rows..(j + 1) * self.rows]
    }

    pub fn col_mut(&mut self, j: usize) -> &mut [f64] {
        &mut self.data[j * self.rows..(j + 1) * self.rows]
    }

    pub fn row(&self, i: usize) -> Vector {
        Vector::from_fn(self.cols, |j| self.get(i, j))
    }

    /// Append a column (the matrix must have `rows` entries per column).
    pub fn push_column(&mut self, column: &[f64]) -> Result<(), NumericsError> {
        if self.cols > 0 && column.len() != self.rows {
            return Err(NumericsError::DimensionMismatch {
                expected: self.rows,
                found: column.len(),
            });
        }
        if self.cols == 0 {
            self.rows = column.len();
        }
        self.data.extend_from_slice(column);
        self.cols += 1;
        Ok(())
    }

    /// `A x`. Zero entries of `x` are skipped.
    pub fn matvec(&self, x: &[f64]) -> Vector {
        assert_eq!(x.len(), self.cols, "matvec dimension mismatch");
        let mut y = vec![0.0; self.rows];
        for (j, xj) in x.iter().enumerate() {
            if *xj == 0.0 {
                continue;
            }
            for (yi, aij) in y.iter_mut().zip(self.col(j)) {
                *yi += aij * xj;
            }
        }
        Vector::from_vec(y)
    }

    /// `Aᵀ x`.
    pub fn t_matvec(&self, x: &[f64]) -> Vector {
        assert_eq!(x.len(), self.rows, "t_matvec dimension mismatch");
        Vector::from_fn(self.cols, |j| dot(self.col(j), x))
    }

    /// `A B`.
    pub fn matmul(&self, b: &Matrix) -> Matrix {
        assert_eq!(self.cols, b.rows, "matmul dimension mismatch");
        let mut data = Vec::with_capacity(self.rows * b.cols);
        for j in 0..b.cols {
            data.extend(self.matvec(b.col(j)).into_vec());
        }
        Matrix {
            rows: self.rows,
            cols: b.cols,
            data,
        }
    }

    /// `Aᵀ B`.
    pub fn t_matmul(&self, b: &Matrix) -> Matrix {
        assert_eq!(self.rows, b.rows, "t_matmul dimension mismatch");
        Matrix::from_fn(self.cols, b.cols, |i, j| dot(self.col(i), b.col(j)))
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn frobenius(&self) -> f64 {
        frobenius(self)
    }

    /// Entrywise `self - other`.
    pub fn sub(&self, other: &Matrix) -> Matrix {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        }
    }

    pub fn scaled(&self, alpha: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|a| a * alpha).collect(),
        }
    }

    /// Largest absolute entry.
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Frobenius norm.
pub fn frobenius(a: &Matrix) -> f64 {
    a.data.iter().map(|v| v * v).sum::<f64>().sqrt()
}
