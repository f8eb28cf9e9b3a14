use super::{tol, Matrix, NumericsError, Vector};

/// LU factorization with partial pivoting, `P A = L U`.
///
/// Elimination skips structural zeros, so banded matrices from
/// five-point stencils factor in roughly `n * bandwidth²` work even
/// though storage is dense.
#[derive(Debug, Clone)]
pub struct LuFactorization {
    n: usize,
    // row-major; unit-lower L below the diagonal, U on and above
    lu: Vec<f64>,
    // row i of PA is row perm[i] of A
    perm: Vec<usize>,
}

impl LuFactorization {
    pub fn new(a: &Matrix) -> Result<Self, NumericsError> {
        if !a.is_square() {
            return Err(NumericsError::NotSquare {
                rows: a.rows(),
                cols: a.cols(),
            });
        }
        let n = a.rows();
        if n == 0 {
            return Err(NumericsError::Empty);
        }
        let mut lu = vec![0.0; n * n];
        for j in 0..n {
            for (i, v) in a.col(j).iter().enumerate() {
                lu[i * n + j] = *v;
            }
        }
        let mut row_scale: Vec<f64> = (0..n)
            .map(|i| lu[i * n..(i + 1) * n].iter().fold(0.0f64, |m, v| m.max(v.abs())))
            .collect();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut nz = Vec::with_capacity(n);

        for k in 0..n {
            let (p, pivot) = (k..n)
                .map(|i| (i, lu[i * n + k].abs()))
                .fold((k, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
            if pivot == 0.0 || pivot < tol::SINGULAR_PIVOT * row_scale[p] {
                return Err(NumericsError::SingularMatrix { column: k, pivot });
            }
            if p != k {
                for j in 0..n {
                    lu.swap(k * n + j, p * n + j);
                }
                perm.swap(k, p);
                row_scale.swap(k, p);
            }
            let diag = lu[k * n + k];
            nz.clear();
            nz.extend((k + 1..n).filter(|&j| lu[k * n + j] != 0.0));
            let (upper, lower) = lu.split_at_mut((k + 1) * n);
            let pivot_row = &upper[k * n..];
            for i in k + 1..n {
                let row = &mut lower[(i - k - 1) * n..(i - k) * n];
                if row[k] == 0.0 {
                    continue;
                }
                let l = row[k] / diag;
                row[k] = l;
                for &j in &nz {
                    row[j] -= l * pivot_row[j];
                }
            }
        }
        Ok(Self { n, lu, perm })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Solve `A x = b`.
    pub fn solve(&self, b: &[f64]) -> Result<Vector, NumericsError> {
        let n = self.n;
        if b.len() != n {
            return Err(NumericsError::DimensionMismatch {
                expected: n,
                found: b.len(),
            });
        }
        let mut x: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            let row = &self.lu[i * n..i * n + i];
            let s: f64 = row.iter().zip(&x[..i]).map(|(l, y)| l * y).sum();
            x[i] -= s;
        }
        for i in (0..n).rev() {
            let row = &self.lu[i * n..(i + 1) * n];
            let s: f64 = row[i + 1..].iter().zip(&x[i + 1..]).map(|(u, y)| u * y).sum();
            x[i] = (x[i] - s) / row[i];
        }
        Ok(Vector::from_vec(x))
    }

    /// Solve `Aᵀ x = b`.
    pub fn solve_transpose(&self, b: &[f64]) -> Result<Vector, NumericsError> {
        let n = self.n;
        if b.len() != n {
            return Err(NumericsError::DimensionMismatch {
                expected: n,
                found: b.len(),
            });
        }
        // Uᵀ z = b (forward, column sweep)
        let mut z = b.to_vec();
        for i in 0..n {
            z[i] /= self.lu[i * n + i];
            let zi = z[i];
            if zi != 0.0 {
                for j in i + 1..n {
                    z[j] -= self.lu[i * n + j] * zi;
                }
            }
        }
        // Lᵀ w = z (backward)
        for i in (0..n).rev() {
            let wi = z[i];
            if wi != 0.0 {
                for j in 0..i {
                    z[j] -= self.lu[i * n + j] * wi;
                }
            }
        }
        let mut x = vec![0.0; n];
        for (i, &p) in self.perm.iter().enumerate() {
            x[p] = z[i];
        }
        Ok(Vector::from_vec(x))
    }
}

/// Direct solve of a square system.
pub fn solve_dense(a: &Matrix, b: &[f64]) -> Result<Vector, NumericsError> {
    if !a.is_square() {
        return Err(NumericsError::NotSquare {
            rows: a.rows(),
            cols: a.cols(),
        });
    }
    if b.len() != a.rows() {
        return Err(NumericsError::DimensionMismatch {
            expected: a.rows(),
            found: b.len(),
        });
    }
    LuFactorization::new(a)?.solve(b)
}
