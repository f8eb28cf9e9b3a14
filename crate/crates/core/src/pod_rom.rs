//! Snapshot windows and POD reduced-order models.
//!
//! Snapshots are centered on their mean before either basis construction
//! (SVD with energy truncation, or modified Gram-Schmidt). A reduced
//! solution lives in the affine space `mean + span(basis)`.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{frobenius, svd, LuFactorization, Matrix, NumericsError, Vector};

/// Centered variations below this fraction of `max(1, ‖Φ‖_F)` count as zero.
pub const DEGENERATE_VARIATION: f64 = 1e-13;
/// Gram-Schmidt drops columns that keep less than this fraction of their norm.
pub const GS_DROP: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PodError {
    #[error("snapshot length {found} does not match window length {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("need at least 2 snapshots, have {0}")]
    TooFewSnapshots(usize),
    #[error("SVD failed: {0}")]
    SvdFailure(NumericsError),
    #[error("reduced system is singular: {0}")]
    SingularReducedSystem(NumericsError),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum BasisMethod {
    #[default]
    Svd,
    Gs,
}

/// Bounded FIFO store of the most recent snapshots.
#[derive(Debug, Clone)]
pub struct SnapshotWindow {
    capacity: usize,
    columns: VecDeque<Vector>,
    insertion_count: usize,
}

impl SnapshotWindow {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity >= 1, "window capacity must be positive");
        Self {
            capacity,
            columns: VecDeque::with_capacity(capacity + 1),
            insertion_count: 0,
        }
    }

    /// Append `u`, evicting the oldest snapshot when full.
    pub fn push(&mut self, u: Vector) -> Result<(), PodError> {
        if let Some(first) = self.columns.front() {
            if first.len() != u.len() {
                return Err(PodError::DimensionMismatch {
                    expected: first.len(),
                    found: u.len(),
                });
            }
        }
        self.columns.push_back(u);
        if self.columns.len() > self.capacity {
            self.columns.pop_front();
        }
        self.insertion_count += 1;
        Ok(())
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.columns.len() == self.capacity
    }

    pub fn insertion_count(&self) -> usize {
        self.insertion_count
    }

    /// Snapshots oldest first.
    pub fn columns(&self) -> impl Iterator<Item = &Vector> {
        self.columns.iter()
    }

    fn snapshot_len(&self) -> usize {
        self.columns.front().map_or(0, |c| c.len())
    }

    fn mean(&self) -> Vector {
        let mut mean = Vector::zeros(self.snapshot_len());
        for c in &self.columns {
            mean.axpy(1.0, c);
        }
        mean.scale(1.0 / self.columns.len() as f64);
        mean
    }

    /// Mean snapshot, the centered snapshot matrix and `‖Φ‖_F`.
    fn centered(&self) -> Result<(Vector, Matrix, f64), PodError> {
        if self.columns.len() < 2 {
            return Err(PodError::TooFewSnapshots(self.columns.len()));
        }
        let mean = self.mean();
        let mut phi = Matrix::zeros(self.snapshot_len(), 0);
        let mut raw_sq = 0.0;
        for c in &self.columns {
            raw_sq += c.dot(c);
            phi.push_column(&c.sub(&mean))
                .expect("window columns share a length");
        }
        Ok((mean, phi, raw_sq.sqrt()))
    }
}

/// POD basis with its mean snapshot.
#[derive(Debug, Clone)]
pub struct ReducedBasis {
    /// `N × M`, orthonormal columns.
    pub basis: Matrix,
    pub mean: Vector,
    /// Singular values of the centered snapshots (empty for Gram-Schmidt).
    pub singular_values: Vector,
    pub source_size: usize,
}

impl ReducedBasis {
    pub fn dim(&self) -> usize {
        self.basis.cols()
    }

    pub fn full_dim(&self) -> usize {
        self.mean.len()
    }

    /// `‖(I − V Vᵀ)(u − mean)‖`.
    pub fn projection_error(&self, u: &[f64]) -> f64 {
        let centered = Vector::from_fn(u.len(), |i| u[i] - self.mean[i]);
        let coords = self.basis.t_matvec(&centered);
        centered.sub(&self.basis.matvec(&coords)).norm2()
    }

    /// `‖VᵀV − I‖_F`.
    pub fn orthonormality_defect(&self) -> f64 {
        let gram = self.basis.t_matmul(&self.basis);
        gram.sub(&Matrix::identity(self.dim())).frobenius()
    }
}

/// Smallest `M` whose discarded energy is at most `eps_rb²` of the total,
/// i.e. the captured fraction is at least `1 − eps_rb²`.
pub fn energy_truncation(singular_values: &[f64], eps_rb: f64) -> usize {
    let total: f64 = singular_values.iter().map(|s| s * s).sum();
    if total == 0.0 {
        return 0;
    }
    let budget = eps_rb * eps_rb * total;
    let mut tail = total;
    for (m, s) in singular_values.iter().enumerate() {
        if tail <= budget {
            return m;
        }
        tail -= s * s;
    }
    singular_values.len()
}

/// POD basis by SVD of the centered snapshot matrix with energy truncation.
pub fn build_basis_svd(window: &SnapshotWindow, eps_rb: f64) -> Result<ReducedBasis, PodError> {
    if !(eps_rb > 0.0 && eps_rb < 1.0) {
        return Err(PodError::InvalidParameter(format!(
            "eps_rb must lie in (0, 1), got {eps_rb}"
        )));
    }
    let (mean, phi, raw_norm) = window.centered()?;
    let floor = DEGENERATE_VARIATION * raw_norm.max(1.0);
    if frobenius(&phi) <= floor {
        return Ok(ReducedBasis {
            basis: Matrix::zeros(mean.len(), 0),
            mean,
            singular_values: Vector::zeros(0),
            source_size: window.len(),
        });
    }
    let dec = svd(&phi).map_err(PodError::SvdFailure)?;
    let significant = dec.singular_values.iter().filter(|&&s| s > floor).count();
    let m = energy_truncation(&dec.singular_values, eps_rb).min(significant);
    let mut basis = Matrix::zeros(mean.len(), 0);
    for j in 0..m {
        basis
            .push_column(dec.left.col(j))
            .expect("left singular vectors share a length");
    }
    if m == 0 {
        basis = Matrix::zeros(mean.len(), 0);
    }
    Ok(ReducedBasis {
        basis,
        mean,
        singular_values: dec.singular_values,
        source_size: window.len(),
    })
}

/// Basis by modified Gram-Schmidt (two passes) on the centered snapshots.
pub fn build_basis_gs(window: &SnapshotWindow) -> Result<ReducedBasis, PodError> {
    let (mean, phi, raw_norm) = window.centered()?;
    let floor = DEGENERATE_VARIATION * raw_norm.max(1.0);
    let mut kept: Vec<Vector> = Vec::new();
    for j in 0..phi.cols() {
        let original = phi.col(j);
        let original_norm = crate::numerics::norm2(original);
        if original_norm <= floor {
            continue;
        }
        let mut w = Vector::from_fn(original.len(), |i| original[i]);
        for _ in 0..2 {
            for q in &kept {
                let c = q.dot(&w);
                w.axpy(-c, q);
            }
        }
        let norm = w.norm2();
        if norm <= GS_DROP * original_norm {
            continue;
        }
        w.scale(1.0 / norm);
        kept.push(w);
    }
    let cols: Vec<&[f64]> = kept.iter().map(|v| v.as_slice()).collect();
    let basis = if cols.is_empty() {
        Matrix::zeros(mean.len(), 0)
    } else {
        Matrix::from_columns(&cols).expect("orthonormalized columns are finite")
    };
    Ok(ReducedBasis {
        basis,
        mean,
        singular_values: Vector::zeros(0),
        source_size: window.len(),
    })
}

/// Build with the requested method; an SVD failure falls back to Gram-Schmidt.
pub fn build_basis(
    window: &SnapshotWindow,
    method: BasisMethod,
    eps_rb: f64,
) -> Result<ReducedBasis, PodError> {
    match method {
        BasisMethod::Svd => match build_basis_svd(window, eps_rb) {
            Err(PodError::SvdFailure(e)) => {
                log::warn!("SVD failed ({e}), falling back to Gram-Schmidt");
                build_basis_gs(window)
            }
            other => other,
        },
        BasisMethod::Gs => build_basis_gs(window),
    }
}

/// Reduced solution `u_rb = V v + mean` and its full-order residual norm.
#[derive(Debug, Clone)]
pub struct RomSolution {
    pub reduced_coords: Vector,
    pub full_field: Vector,
    pub residual_norm: f64,
}

/// Galerkin projection: solve `(VᵀAV) v = Vᵀ f − VᵀA·mean`.
pub fn rom_solve(basis: &ReducedBasis, a: &Matrix, f: &[f64]) -> Result<RomSolution, PodError> {
    let n = basis.full_dim();
    if a.rows() != n || a.cols() != n {
        return Err(PodError::DimensionMismatch {
            expected: n,
            found: a.rows().max(a.cols()),
        });
    }
    if f.len() != n {
        return Err(PodError::DimensionMismatch {
            expected: n,
            found: f.len(),
        });
    }
    let shifted_rhs = Vector::from_fn(n, |i| f[i]).sub(&a.matvec(&basis.mean));
    let (reduced_coords, full_field) = if basis.dim() == 0 {
        (Vector::zeros(0), basis.mean.clone())
    } else {
        let av = a.matmul(&basis.basis);
        let reduced = basis.basis.t_matmul(&av);
        let rhs = basis.basis.t_matvec(&shifted_rhs);
        let v = LuFactorization::new(&reduced)
            .and_then(|lu| lu.solve(&rhs))
            .map_err(PodError::SingularReducedSystem)?;
        let full = basis.basis.matvec(&v).add(&basis.mean);
        (v, full)
    };
    if !full_field.is_finite() {
        return Err(PodError::SingularReducedSystem(NumericsError::NonFinite(0)));
    }
    let residual_norm = a.matvec(&full_field).sub(f).norm2();
    Ok(RomSolution {
        reduced_coords,
        full_field,
        residual_norm,
    })
}

/// `‖u − u_rb‖ ≤ ‖A⁻¹‖ · ‖r‖`.
pub fn rom_error_bound(inv_norm_estimate: f64, residual_norm: f64) -> f64 {
    debug_assert!(inv_norm_estimate >= 0.0 && residual_norm >= 0.0);
    inv_norm_estimate * residual_norm
}
