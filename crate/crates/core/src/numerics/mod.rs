//! Dense linear-algebra substrate shared by every other module.
//!
//! Storage is column-major so snapshot matrices can grow by whole columns.
//! Everything here is a pure function of its inputs.

mod lu;
mod matrix;
mod svd;
mod vector;

pub use lu::{solve_dense, LuFactorization};
pub use matrix::{frobenius, Matrix};
pub use svd::{svd, SvdResult};
pub use vector::{norm2, Vector};

use thiserror::Error;

/// Library tolerances. Read-only by construction.
pub mod tol {
    /// A pivot smaller than this times the largest entry of its row is singular.
    pub const SINGULAR_PIVOT: f64 = 1e-14;
    /// Singular values below this fraction of the largest are discarded.
    pub const SVD_RANK: f64 = 1e-13;
    /// Relative off-diagonal threshold for one Jacobi rotation.
    pub const JACOBI_ROTATION: f64 = 1e-15;
    /// Sweep budget of the Jacobi SVD before reporting non-convergence.
    pub const JACOBI_MAX_SWEEPS: usize = 80;
    /// Orthonormality promised for SVD factors and reduced bases.
    pub const ORTHONORMALITY: f64 = 1e-10;
    /// Backward residual promised by [`super::solve_dense`] on well-conditioned input.
    pub const SOLVE_RESIDUAL: f64 = 1e-10;
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NumericsError {
    #[error("non-finite entry at position {0}")]
    NonFinite(usize),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("matrix is not square ({rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },
    #[error("matrix is numerically singular (pivot {pivot:e} at column {column})")]
    SingularMatrix { column: usize, pivot: f64 },
    #[error("SVD did not converge after {sweeps} sweeps")]
    ConvergenceFailure { sweeps: usize },
    #[error("empty matrix")]
    Empty,
}

/// Estimate `‖A⁻¹‖₂` by power iteration on `A⁻ᵀA⁻¹`.
///
/// The estimate approaches the true norm from below.
pub fn inverse_norm_estimate(a: &Matrix, max_iter: usize) -> Result<f64, NumericsError> {
    let lu = LuFactorization::new(a)?;
    let n = a.rows();
    let mut v = Vector::from_fn(n, |i| 1.0 + 0.1 * ((i * 7919) % 13) as f64);
    let nv = v.norm2();
    v.scale(1.0 / nv);
    let mut estimate = 0.0;
    for _ in 0..max_iter {
        let w = lu.solve(&v)?;
        let z = lu.solve_transpose(&w)?;
        let zn = z.norm2();
        if zn == 0.0 {
            break;
        }
        let next = zn.sqrt();
        v = z;
        v.scale(1.0 / zn);
        let converged = (next - estimate).abs() <= 1e-15 * next;
        estimate = next;
        if converged {
            break;
        }
    }
    Ok(estimate)
}
