//! Small helpers over nalgebra for complex Hermitian matrices.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::{Error, Result, C64};

pub type CMatrix = DMatrix<C64>;
pub type CVector = DVector<C64>;

/// `tr(A B)` without forming the product.
pub fn trace_product(a: &CMatrix, b: &CMatrix) -> C64 {
    debug_assert_eq!(a.ncols(), b.nrows());
    debug_assert_eq!(a.nrows(), b.ncols());
    let mut acc = C64::new(0.0, 0.0);
    for i in 0..a.nrows() {
        for j in 0..a.ncols() {
            acc += a[(i, j)] * b[(j, i)];
        }
    }
    acc
}

pub fn trace(a: &CMatrix) -> C64 {
    a.diagonal().iter().sum()
}

/// Largest absolute deviation of `a` from its conjugate transpose.
pub fn hermitian_defect(a: &CMatrix) -> f64 {
    let mut worst = 0.0_f64;
    for i in 0..a.nrows() {
        for j in i..a.ncols() {
            worst = worst.max((a[(i, j)] - a[(j, i)].conj()).norm());
        }
    }
    worst
}

/// Cholesky factor of a Hermitian PSD matrix.
///
/// Retries once with `1e-12 * tr(A) / n` added to the diagonal when the
/// plain factorization fails.
pub fn cholesky_with_jitter(a: &CMatrix) -> Result<Cholesky<C64, Dyn>> {
    if let Some(chol) = a.clone().cholesky() {
        return Ok(chol);
    }
    let n = a.nrows().max(1);
    let jitter = 1e-12 * trace(a).re.abs() / n as f64;
    let mut shifted = a.clone();
    for i in 0..a.nrows() {
        shifted[(i, i)] += C64::new(jitter, 0.0);
    }
    shifted
        .cholesky()
        .ok_or_else(|| Error::Numeric("Cholesky factorization failed after jitter".into()))
}

/// Cholesky factorization of a matrix that must be Hermitian positive definite.
pub fn cholesky_pd(a: &CMatrix, what: &str) -> Result<Cholesky<C64, Dyn>> {
    a.clone()
        .cholesky()
        .ok_or_else(|| Error::Numeric(format!("{what} is not positive definite")))
}

/// Ratio of largest to smallest eigenvalue of a Hermitian matrix.
pub fn hermitian_condition(a: &CMatrix) -> f64 {
    let eig = a.clone().symmetric_eigenvalues();
    let max = eig.iter().cloned().fold(f64::MIN, f64::max);
    let min = eig.iter().cloned().fold(f64::MAX, f64::min);
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Smallest eigenvalue of a Hermitian matrix.
pub fn min_eigenvalue(a: &CMatrix) -> f64 {
    a.clone()
        .symmetric_eigenvalues()
        .iter()
        .cloned()
        .fold(f64::MAX, f64::min)
}

pub fn identity(n: usize) -> CMatrix {
    CMatrix::identity(n, n)
}

pub fn real_diagonal(values: &[f64]) -> CMatrix {
    CMatrix::from_diagonal(&CVector::from_iterator(
        values.len(),
        values.iter().map(|&v| C64::new(v, 0.0)),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trace_product_matches_explicit_product() {
        let a = CMatrix::from_fn(3, 3, |i, j| C64::new(i as f64 + 1.0, j as f64 - 0.5));
        let b = CMatrix::from_fn(3, 3, |i, j| C64::new((i * j) as f64, 1.0 + i as f64));
        let direct = trace(&(&a * &b));
        assert!((trace_product(&a, &b) - direct).norm() < 1e-12);
    }

    #[test]
    fn jitter_rescues_singular_psd() {
        let v = CVector::from_vec(vec![C64::new(1.0, 0.0), C64::new(0.0, 1.0)]);
        let rank_one = &v * v.adjoint();
        assert!(cholesky_with_jitter(&rank_one).is_ok());
    }
}
