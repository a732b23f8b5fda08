//! Correlation matrices: positive-semidefiniteness test and square-root factor.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::scalar::Real;

/// Smallest eigenvalue still treated as zero.
pub const PSD_TOLERANCE: f64 = -1e-10;

/// Symmetric, unit-diagonal correlation matrix over named drivers.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationMatrix<T: Real> {
    labels: Vec<String>,
    entries: Vec<T>,
}

impl<T: Real> CorrelationMatrix<T> {
    pub(crate) fn from_parts(labels: Vec<String>, entries: Vec<T>) -> Self {
        debug_assert_eq!(labels.len() * labels.len(), entries.len());
        Self { labels, entries }
    }

    pub fn identity(labels: Vec<String>) -> Self {
        let n = labels.len();
        let mut entries = vec![T::zero(); n * n];
        for i in 0..n {
            entries[i * n + i] = T::one();
        }
        Self { labels, entries }
    }

    pub fn dim(&self) -> usize {
        self.labels.len()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        self.entries[i * self.dim() + j]
    }

    /// Row-major entries.
    pub fn entries(&self) -> &[T] {
        &self.entries
    }
}

fn to_dmatrix(n: usize, entries: &[f64]) -> DMatrix<f64> {
    DMatrix::from_row_slice(n, n, entries)
}

/// Smallest eigenvalue of a symmetric matrix given row-major.
pub fn min_eigenvalue(n: usize, entries: &[f64]) -> f64 {
    if n == 0 {
        return 0.0;
    }
    SymmetricEigen::new(to_dmatrix(n, entries))
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// Returns a row-major `n x n` matrix `F` with `F F^T` equal to the input
/// (after clipping eigenvalues in `[PSD_TOLERANCE, 0)` to zero).
///
/// A Cholesky factor is used when the matrix is positive definite; otherwise
/// the eigen square root with rows rescaled to restore the unit diagonal.
pub fn factorize(n: usize, entries: &[f64]) -> Vec<f64> {
    let m = to_dmatrix(n, entries);
    if let Some(ch) = m.clone().cholesky() {
        let l = ch.l();
        return (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).map(|(i, j)| l[(i, j)]).collect();
    }
    let eig = SymmetricEigen::new(m);
    let mut f = eig.eigenvectors.clone();
    for (j, &lambda) in eig.eigenvalues.iter().enumerate() {
        let s = lambda.max(0.0).sqrt();
        for i in 0..n {
            f[(i, j)] *= s;
        }
    }
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        let norm: f64 = (0..n).map(|j| f[(i, j)] * f[(i, j)]).sum::<f64>().sqrt();
        let scale = if norm > 0.0 { 1.0 / norm } else { 0.0 };
        for j in 0..n {
            out[i * n + j] = f[(i, j)] * scale;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Smallest root of the characteristic polynomial of the equicorrelation
    /// matrix, by bisection on det(A - x I) evaluated by cofactor expansion.
    fn det3(a: &[f64; 9]) -> f64 {
        a[0] * (a[4] * a[8] - a[5] * a[7]) - a[1] * (a[3] * a[8] - a[5] * a[6])
            + a[2] * (a[3] * a[7] - a[4] * a[6])
    }

    fn char_poly_min_root(a: &[f64; 9]) -> f64 {
        let p = |x: f64| {
            let mut b = *a;
            b[0] -= x;
            b[4] -= x;
            b[8] -= x;
            det3(&b)
        };
        // det(A - xI) -> +inf as x -> -inf for 3x3; scan for first sign change
        let mut lo = -10.0;
        let mut x = lo;
        while p(x) > 0.0 {
            lo = x;
            x += 1e-3;
        }
        let mut hi = x;
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if p(mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn strongly_negative_equicorrelation_is_not_psd() {
        let a = [1.0, -0.9, -0.9, -0.9, 1.0, -0.9, -0.9, -0.9, 1.0];
        let oracle = char_poly_min_root(&a);
        // closed form for equicorrelation: 1 + (n-1) rho = -0.8
        assert!((oracle + 0.8).abs() < 1e-9);
        let lam = min_eigenvalue(3, &a);
        assert!((lam - oracle).abs() < 1e-9);
        assert!(lam < PSD_TOLERANCE);
    }

    #[test]
    fn identity_factor_is_identity() {
        let f = factorize(2, &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(f, vec![1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn singular_matrix_factor_reproduces_matrix() {
        // perfectly correlated pair: rank one
        let a = [1.0, 1.0, 1.0, 1.0];
        let f = factorize(2, &a);
        for i in 0..2 {
            for j in 0..2 {
                let v: f64 = (0..2).map(|k| f[i * 2 + k] * f[j * 2 + k]).sum();
                assert!((v - a[i * 2 + j]).abs() < 1e-12);
            }
        }
    }

    proptest::proptest! {
        #[test]
        fn normalized_gram_matrices_pass_psd_check(
            raw in proptest::collection::vec(-1.0f64..1.0, 16)
        ) {
            let n = 4;
            let mut g = vec![0.0; n * n];
            for i in 0..n {
                for j in 0..n {
                    g[i * n + j] = (0..n).map(|k| raw[i * n + k] * raw[j * n + k]).sum();
                }
            }
            for i in 0..n {
                proptest::prop_assume!(g[i * n + i] > 1e-6);
            }
            let d: Vec<f64> = (0..n).map(|i| g[i * n + i].sqrt()).collect();
            for i in 0..n {
                for j in 0..n {
                    g[i * n + j] /= d[i] * d[j];
                }
            }
            proptest::prop_assert!(min_eigenvalue(n, &g) >= PSD_TOLERANCE);
            let f = factorize(n, &g);
            for i in 0..n {
                for j in 0..n {
                    let v: f64 = (0..n).map(|k| f[i * n + k] * f[j * n + k]).sum();
                    proptest::prop_assert!((v - g[i * n + j]).abs() < 1e-8);
                }
            }
        }
    }
}
