//! Small dense linear-algebra helpers shared by the model, inference, and
//! learning modules. Matrices here are tiny (feature-count sized), so the
//! conversions to nalgebra are cheap.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::error::{Error, Result};

pub(crate) fn to_na_matrix(a: &ArrayView2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |r, c| a[[r, c]])
}

pub(crate) fn to_na_vector(v: &ArrayView1<f64>) -> DVector<f64> {
    DVector::from_fn(v.len(), |r, _| v[r])
}

pub(crate) fn from_na_matrix(m: &DMatrix<f64>) -> Array2<f64> {
    Array2::from_shape_fn((m.nrows(), m.ncols()), |(r, c)| m[(r, c)])
}

pub(crate) fn from_na_vector(v: &DVector<f64>) -> Array1<f64> {
    Array1::from_shape_fn(v.len(), |r| v[r])
}

/// Cholesky factorization of a symmetric positive definite matrix.
pub(crate) struct SpdFactor {
    chol: Cholesky<f64, Dyn>,
}

impl SpdFactor {
    pub fn new(a: &ArrayView2<f64>) -> Option<Self> {
        Cholesky::new(to_na_matrix(a)).map(|chol| SpdFactor { chol })
    }

    /// ln det(A).
    pub fn log_det(&self) -> f64 {
        2.0 * self.chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    /// x such that A x = b.
    pub fn solve(&self, b: &ArrayView1<f64>) -> Array1<f64> {
        from_na_vector(&self.chol.solve(&to_na_vector(b)))
    }

    /// X such that A X = B.
    pub fn solve_matrix(&self, b: &ArrayView2<f64>) -> Array2<f64> {
        from_na_matrix(&self.chol.solve(&to_na_matrix(b)))
    }

    pub fn inverse(&self) -> Array2<f64> {
        from_na_matrix(&self.chol.inverse())
    }

    /// xᵀ A⁻¹ x.
    pub fn inv_quadratic(&self, x: &ArrayView1<f64>) -> f64 {
        let v = to_na_vector(x);
        self.chol.solve(&v).dot(&v)
    }

    /// Lower-triangular factor L with A = L Lᵀ.
    pub fn lower(&self) -> Array2<f64> {
        from_na_matrix(&self.chol.clone().l())
    }
}

/// Cholesky with a single retry after adding `eps` to the diagonal. Returns
/// the factor and whether the floor was applied.
pub(crate) fn cholesky_with_floor(a: &ArrayView2<f64>, eps: f64) -> Result<(SpdFactor, bool)> {
    if let Some(f) = SpdFactor::new(a) {
        return Ok((f, false));
    }
    let mut floored = a.to_owned();
    for d in 0..floored.nrows() {
        floored[[d, d]] += eps;
    }
    match SpdFactor::new(&floored.view()) {
        Some(f) => Ok((f, true)),
        None => Err(Error::SingularCovariance),
    }
}

pub(crate) fn min_symmetric_eigenvalue(a: &ArrayView2<f64>) -> f64 {
    let eig = to_na_matrix(a).symmetric_eigen();
    eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min)
}

pub(crate) fn max_asymmetry(a: &ArrayView2<f64>) -> f64 {
    let mut worst = 0.0f64;
    for r in 0..a.nrows() {
        for c in (r + 1)..a.ncols() {
            worst = worst.max((a[[r, c]] - a[[c, r]]).abs());
        }
    }
    worst
}

/// Symmetrize in place and clamp the spectrum so the smallest eigenvalue is
/// at least `eps`. Only deficient eigendirections are lifted; well-behaved
/// matrices return bit-identical.
pub(crate) fn floor_spd(cov: &mut Array2<f64>, eps: f64) {
    let sym = 0.5 * (&*cov + &cov.t());
    *cov = sym;
    let eig = to_na_matrix(&cov.view()).symmetric_eigen();
    let min = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    if min >= eps {
        return;
    }
    let mut clamped = eig.eigenvalues;
    for v in clamped.iter_mut() {
        if *v < eps {
            *v = eps;
        }
    }
    let rebuilt =
        &eig.eigenvectors * DMatrix::from_diagonal(&clamped) * eig.eigenvectors.transpose();
    let rebuilt = from_na_matrix(&rebuilt);
    *cov = 0.5 * (&rebuilt + &rebuilt.t());
}

/// log Σᵢ exp(xᵢ), stable under large negative magnitudes.
pub(crate) fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let sum: f64 = values.iter().map(|&v| (v - max).exp()).sum();
    max + sum.ln()
}
