//! Dense linear-algebra helpers.
//!
//! Large covariance matrices live in `faer::Mat` so that factorizations run on
//! faer's blocked kernels; small `p × p` parameter matrices stay in `ndarray`.

use faer::linalg::solvers::{DenseSolveCore, Solve};
use faer::linalg::triangular_solve::solve_lower_triangular_in_place;
use faer::{Mat, MatRef, Par, Side};
use ndarray::{Array1, Array2};

use crate::error::{Error, Result};

/// Lower Cholesky factor of a symmetric positive definite matrix.
pub struct Cholesky {
    llt: faer::linalg::solvers::Llt<f64>,
    /// Diagonal jitter that had to be added before the factorization succeeded.
    pub jitter: f64,
}

impl Cholesky {
    /// Factorizes `a` without any jitter.
    pub fn new(a: MatRef<'_, f64>, context: &str) -> Result<Self> {
        let llt = a
            .llt(Side::Lower)
            .map_err(|_| Error::NotPositiveDefinite(context.to_string()))?;
        Ok(Self { llt, jitter: 0.0 })
    }

    /// Factorizes `a`, adding `rel · mean(diag)` to the diagonal for
    /// `rel = 1e-10, 1e-9, …` up to `max_rel` whenever the plain factorization fails.
    pub fn with_jitter(a: &Mat<f64>, max_rel: f64, context: &str) -> Result<Self> {
        if let Ok(llt) = a.llt(Side::Lower) {
            return Ok(Self { llt, jitter: 0.0 });
        }
        let n = a.nrows();
        let mean_diag = (0..n).map(|i| a[(i, i)]).sum::<f64>() / n.max(1) as f64;
        let mut rel = 1e-10;
        let mut work = a.clone();
        while rel <= max_rel * (1.0 + 1e-12) {
            let jitter = rel * mean_diag;
            for i in 0..n {
                work[(i, i)] = a[(i, i)] + jitter;
            }
            if let Ok(llt) = work.llt(Side::Lower) {
                return Ok(Self { llt, jitter });
            }
            rel *= 10.0;
        }
        Err(Error::NotPositiveDefinite(format!(
            "{context}: factorization failed with jitter up to {max_rel:e}·mean(diag)"
        )))
    }

    pub fn dim(&self) -> usize {
        self.llt.L().nrows()
    }

    pub fn factor(&self) -> MatRef<'_, f64> {
        self.llt.L()
    }

    /// `log |A| = 2 Σ log L_ii`.
    pub fn log_det(&self) -> f64 {
        let l = self.llt.L();
        2.0 * (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>()
    }

    /// Solves `L y = b` (one triangular solve); `‖y‖²` is the quadratic form `bᵀA⁻¹b`.
    pub fn whiten(&self, b: &[f64]) -> Vec<f64> {
        let mut rhs = Mat::from_fn(b.len(), 1, |i, _| b[i]);
        solve_lower_triangular_in_place(self.llt.L(), rhs.as_mut(), Par::Seq);
        (0..b.len()).map(|i| rhs[(i, 0)]).collect()
    }

    pub fn quad_form(&self, b: &[f64]) -> f64 {
        self.whiten(b).iter().map(|v| v * v).sum()
    }

    /// `A⁻¹ b`.
    pub fn solve_vec(&self, b: &[f64]) -> Vec<f64> {
        let mut rhs = Mat::from_fn(b.len(), 1, |i, _| b[i]);
        self.llt.solve_in_place(rhs.as_mut());
        (0..b.len()).map(|i| rhs[(i, 0)]).collect()
    }

    pub fn solve_mat(&self, b: MatRef<'_, f64>) -> Mat<f64> {
        let mut rhs = b.to_owned();
        self.llt.solve_in_place(rhs.as_mut());
        rhs
    }

    pub fn inverse(&self) -> Mat<f64> {
        self.llt.inverse()
    }
}

pub fn to_faer(a: &Array2<f64>) -> Mat<f64> {
    Mat::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

pub fn to_ndarray(a: MatRef<'_, f64>) -> Array2<f64> {
    Array2::from_shape_fn((a.nrows(), a.ncols()), |(i, j)| a[(i, j)])
}

/// Eigen-decomposition of a small symmetric matrix; eigenvalues ascending.
pub fn sym_eigen(a: &Array2<f64>) -> Result<(Array1<f64>, Array2<f64>)> {
    let m = to_faer(a);
    let evd = m
        .self_adjoint_eigen(Side::Lower)
        .map_err(|e| Error::Singular(format!("eigendecomposition failed: {e:?}")))?;
    let s = evd.S().column_vector();
    let vals = Array1::from_shape_fn(a.nrows(), |i| s[i]);
    Ok((vals, to_ndarray(evd.U())))
}

pub fn min_eigenvalue(a: &Array2<f64>) -> Result<f64> {
    let vals = to_faer(a)
        .self_adjoint_eigenvalues(Side::Lower)
        .map_err(|e| Error::Singular(format!("eigenvalue computation failed: {e:?}")))?;
    Ok(vals.into_iter().fold(f64::INFINITY, f64::min))
}

pub fn min_eigenvalue_faer(a: MatRef<'_, f64>) -> Result<f64> {
    let vals = a
        .self_adjoint_eigenvalues(Side::Lower)
        .map_err(|e| Error::Singular(format!("eigenvalue computation failed: {e:?}")))?;
    Ok(vals.into_iter().fold(f64::INFINITY, f64::min))
}

/// Inverse of a small SPD matrix, or `None` if it is not positive definite.
pub fn spd_inverse(a: &Array2<f64>) -> Option<Array2<f64>> {
    let m = to_faer(a);
    let llt = m.llt(Side::Lower).ok()?;
    Some(to_ndarray(llt.inverse().as_ref()))
}

/// Frobenius norm of `a - b`.
pub fn frobenius_distance(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn cholesky_log_det_and_solves() {
        let a = array![[4.0, 2.0, 0.4], [2.0, 3.0, 0.5], [0.4, 0.5, 2.0]];
        let ch = Cholesky::new(to_faer(&a).as_ref(), "test").unwrap();
        // det computed by cofactor expansion
        let det: f64 = 4.0 * (3.0 * 2.0 - 0.25) - 2.0 * (2.0 * 2.0 - 0.5 * 0.4)
            + 0.4 * (2.0 * 0.5 - 3.0 * 0.4);
        assert!((ch.log_det() - det.ln()).abs() < 1e-12);
        let b = [1.0, -2.0, 0.5];
        let x = ch.solve_vec(&b);
        let back = a.dot(&Array1::from(x.clone()));
        for i in 0..3 {
            assert!((back[i] - b[i]).abs() < 1e-12);
        }
        let q: f64 = b.iter().zip(&x).map(|(u, v)| u * v).sum();
        assert!((ch.quad_form(&b) - q).abs() < 1e-12);
    }

    #[test]
    fn jitter_rescues_semidefinite() {
        // rank-one matrix
        let a = Mat::from_fn(3, 3, |_, _| 1.0);
        let ch = Cholesky::with_jitter(&a, 1e-6, "rank one").unwrap();
        assert!(ch.jitter > 0.0 && ch.jitter <= 1e-6);
        let neg = Mat::from_fn(2, 2, |i, j| if i == j { -1.0 } else { 0.0 });
        assert!(Cholesky::with_jitter(&neg, 1e-6, "negative").is_err());
    }

    #[test]
    fn eigen_of_diagonal() {
        let a = array![[3.0, 0.0], [0.0, -1.0]];
        let (vals, _) = sym_eigen(&a).unwrap();
        assert!((vals[0] + 1.0).abs() < 1e-14 && (vals[1] - 3.0).abs() < 1e-14);
        assert!((min_eigenvalue(&a).unwrap() + 1.0).abs() < 1e-14);
    }
}
