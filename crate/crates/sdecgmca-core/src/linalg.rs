//! Symmetric eigendecomposition by cyclic Jacobi rotations.
//!
//! Every symmetric eigenproblem in this crate is tiny (mixing Grams and
//! channel covariances, a few rows on a side), so a plain Jacobi sweep is
//! chosen for its robustness: it cannot fail to converge on symmetric
//! input and delivers small-backward-error eigenpairs regardless of
//! clustering. Anything needing scale or non-symmetric factorizations
//! goes through nalgebra instead.

use nalgebra::{DMatrix, DVector};

/// Eigenvalues (ascending) and matching orthonormal eigenvectors (as
/// columns) of a symmetric matrix. Asymmetry beyond roundoff is the
/// caller's bug; the routine symmetrizes the input to stay well-posed.
pub(crate) fn symmetric_eigen(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = m.nrows();
    assert_eq!(n, m.ncols(), "eigendecomposition needs a square matrix");
    let mut a = DMatrix::from_fn(n, n, |i, j| 0.5 * (m[(i, j)] + m[(j, i)]));
    let mut vectors = DMatrix::identity(n, n);
    let scale = a.abs().max().max(f64::MIN_POSITIVE);
    for _sweep in 0..60 {
        let mut off_diag = 0.0f64;
        for p in 0..n {
            for q in (p + 1)..n {
                off_diag = off_diag.max(a[(p, q)].abs());
            }
        }
        if off_diag <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq.abs() <= 1e-18 * scale {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = vectors[(k, p)];
                    let vkq = vectors[(k, q)];
                    vectors[(k, p)] = c * vkp - s * vkq;
                    vectors[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(i, i)].total_cmp(&a[(j, j)]));
    let values = DVector::from_fn(n, |i, _| a[(order[i], order[i])]);
    let sorted = DMatrix::from_fn(n, n, |i, j| vectors[(i, order[j])]);
    (values, sorted)
}

/// Smallest and largest eigenvalue of a symmetric matrix.
pub(crate) fn eigen_extrema(m: &DMatrix<f64>) -> (f64, f64) {
    let (values, _) = symmetric_eigen(m);
    (values[0], values[values.len() - 1])
}
