use super::vector::{dot, norm2};
use super::{tol, Matrix, NumericsError, Vector};

/// Thin SVD `A = left · diag(singular_values) · right`.
///
/// `left` is `rows × r` with orthonormal columns, `right` is `r × cols`
/// with orthonormal rows, and `r` is the numerical rank.
#[derive(Debug, Clone)]
pub struct SvdResult {
    pub left: Matrix,
    pub singular_values: Vector,
    pub right: Matrix,
}

impl SvdResult {
    pub fn rank(&self) -> usize {
        self.singular_values.len()
    }

    pub fn reconstruct(&self) -> Matrix {
        let mut us = self.left.clone();
        for (j, s) in self.singular_values.iter().enumerate() {
            us.col_mut(j).iter_mut().for_each(|v| *v *= s);
        }
        us.matmul(&self.right)
    }
}

/// One-sided (Hestenes) Jacobi SVD.
///
/// Singular values below `tol::SVD_RANK · σ_max` are truncated; the zero
/// matrix yields an empty decomposition.
pub fn svd(a: &Matrix) -> Result<SvdResult, NumericsError> {
    if a.rows() == 0 || a.cols() == 0 {
        return Err(NumericsError::Empty);
    }
    if a.rows() < a.cols() {
        let t = svd_tall(&a.transpose())?;
        return Ok(SvdResult {
            left: t.right.transpose(),
            singular_values: t.singular_values,
            right: t.left.transpose(),
        });
    }
    svd_tall(a)
}

fn svd_tall(a: &Matrix) -> Result<SvdResult, NumericsError> {
    let m = a.rows();
    let n = a.cols();
    let mut u: Vec<Vec<f64>> = (0..n).map(|j| a.col(j).to_vec()).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();

    let mut sweeps = 0;
    loop {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = dot(&u[p], &u[p]);
                let beta = dot(&u[q], &u[q]);
                let gamma = dot(&u[p], &u[q]);
                if gamma == 0.0 || gamma.abs() <= tol::JACOBI_ROTATION * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut u, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        sweeps += 1;
        if !rotated {
            break;
        }
        if sweeps >= tol::JACOBI_MAX_SWEEPS {
            return Err(NumericsError::ConvergenceFailure { sweeps });
        }
    }

    let mut order: Vec<(usize, f64)> = u.iter().map(|c| norm2(c)).enumerate().collect();
    order.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));
    let sigma_max = order.first().map_or(0.0, |o| o.1);
    let kept: Vec<(usize, f64)> = order
        .into_iter()
        .filter(|&(_, s)| s > 0.0 && s > tol::SVD_RANK * sigma_max)
        .collect();

    let r = kept.len();
    let mut left = Matrix::zeros(m, r);
    let mut right = Matrix::zeros(r, n);
    for (k, &(j, s)) in kept.iter().enumerate() {
        for (dst, src) in left.col_mut(k).iter_mut().zip(&u[j]) {
            *dst = src / s;
        }
        for (i, vi) in v[j].iter().enumerate() {
            right.set(k, i, *vi);
        }
    }
    Ok(SvdResult {
        left,
        singular_values: Vector::from_vec(kept.iter().map(|k| k.1).collect()),
        right,
    })
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(q);
    let (cp, cq) = (&mut lo[p], &mut hi[0]);
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (xp, xq) = (*x, *y);
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_matrix() {
        let r = svd(&Matrix::from_diagonal(&[3.0, 1.0])).unwrap();
        assert_eq!(r.singular_values.len(), 2);
        assert!((r.singular_values[0] - 3.0).abs() < 1e-15);
        assert!((r.singular_values[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn zero_matrix_is_rank_zero() {
        let r = svd(&Matrix::zeros(4, 3)).unwrap();
        assert_eq!(r.rank(), 0);
    }

    #[test]
    fn rank_one_outer_product() {
        // u with norm 2, v with norm 1
        let u = [2.0 / 3.0_f64.sqrt(), -2.0 / 3.0_f64.sqrt(), 2.0 / 3.0_f64.sqrt()];
        let v = [0.6, 0.0, 0.8, 0.0];
        let a = Matrix::from_fn(3, 4, |i, j| u[i] * v[j]);
        let r = svd(&a).unwrap();
        assert_eq!(r.rank(), 1);
        assert!((r.singular_values[0] - norm2(&u) * norm2(&v)).abs() < 1e-14);
    }

    #[test]
    fn wide_matrix_goes_through_transpose() {
        let a = Matrix::from_rows(&[&[1.0, 2.0, 3.0, 4.0], &[0.0, 1.0, 0.0, -1.0]]).unwrap();
        let r = svd(&a).unwrap();
        assert_eq!((r.left.rows(), r.right.cols()), (2, 4));
        assert!(r.reconstruct().sub(&a).frobenius() < 1e-13 * a.frobenius());
    }

    #[test]
    fn empty_rejected() {
        assert!(matches!(svd(&Matrix::zeros(0, 3)), Err(NumericsError::Empty)));
    }
}
