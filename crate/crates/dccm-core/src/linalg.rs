//! Dense linear algebra kernels for small symmetric matrices.
//!
//! Everything here targets the state dimensions this crate works with
//! (n <= 4 in practice, generic in principle): leading principal minors via
//! pivoted elimination, cofactor matrices for minor gradients, a cyclic
//! Jacobi eigensolver, and a Cholesky factorization whose pivot check doubles
//! as the positive-definiteness test.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Force exact symmetry by averaging with the transpose, in place.
pub fn symmetrize(a: &mut DMatrix<f64>) {
    let n = a.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = avg;
            a[(j, i)] = avg;
        }
    }
}

/// Determinant by Gaussian elimination with partial pivoting.
pub fn determinant(s: &DMatrix<f64>) -> f64 {
    let n = s.nrows();
    debug_assert_eq!(n, s.ncols());
    match n {
        0 => return 1.0,
        1 => return s[(0, 0)],
        2 => return s[(0, 0)] * s[(1, 1)] - s[(0, 1)] * s[(1, 0)],
        _ => {}
    }
    let mut a = s.clone();
    let mut det = 1.0;
    for col in 0..n {
        let mut pivot = col;
        for row in (col + 1)..n {
            if a[(row, col)].abs() > a[(pivot, col)].abs() {
                pivot = row;
            }
        }
        if a[(pivot, col)] == 0.0 {
            return 0.0;
        }
        if pivot != col {
            a.swap_rows(pivot, col);
            det = -det;
        }
        det *= a[(col, col)];
        for row in (col + 1)..n {
            let factor = a[(row, col)] / a[(col, col)];
            for k in col..n {
                a[(row, k)] -= factor * a[(col, k)];
            }
        }
    }
    det
}

/// Leading principal minors `det(S[..i, ..i])` for `i = 1..=n`.
///
/// Each minor gets its own pivoted elimination; pivoting inside a shared
/// factorization would mix rows across leading blocks.
pub fn leading_minors(s: &DMatrix<f64>) -> Vec<f64> {
    let n = s.nrows();
    debug_assert_eq!(n, s.ncols());
    (1..=n)
        .map(|k| determinant(&s.view((0, 0), (k, k)).into_owned()))
        .collect()
}

/// Cofactor matrix `C[a,b] = d det(S) / d S[a,b]` of a square matrix.
pub fn cofactor_matrix(s: &DMatrix<f64>) -> DMatrix<f64> {
    let n = s.nrows();
    debug_assert_eq!(n, s.ncols());
    if n == 1 {
        return DMatrix::from_element(1, 1, 1.0);
    }
    let mut c = DMatrix::zeros(n, n);
    let mut sub = DMatrix::zeros(n - 1, n - 1);
    for a in 0..n {
        for b in 0..n {
            for (si, i) in (0..n).filter(|&i| i != a).enumerate() {
                for (sj, j) in (0..n).filter(|&j| j != b).enumerate() {
                    sub[(si, sj)] = s[(i, j)];
                }
            }
            let sign = if (a + b) % 2 == 0 { 1.0 } else { -1.0 };
            c[(a, b)] = sign * determinant(&sub);
        }
    }
    c
}

/// Weighted sum of leading-minor gradients: `sum_i w[i-1] * d minor_i / d S`,
/// zero-padded to n x n. Used by the hinge loss backward pass.
pub fn leading_minor_gradient(s: &DMatrix<f64>, weights: &[f64]) -> DMatrix<f64> {
    let n = s.nrows();
    debug_assert_eq!(weights.len(), n);
    let mut grad = DMatrix::zeros(n, n);
    for (k, &w) in weights.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        let block = s.view((0, 0), (k + 1, k + 1)).into_owned();
        let c = cofactor_matrix(&block);
        for i in 0..=k {
            for j in 0..=k {
                grad[(i, j)] += w * c[(i, j)];
            }
        }
    }
    grad
}

/// Eigenvalues of a symmetric matrix by the cyclic Jacobi rotation method,
/// returned in ascending order.
///
/// Follows the classic plane-rotation scheme (Numerical Recipes §11.1);
/// eigenvectors are not accumulated since no caller needs them.
pub fn jacobi_eigenvalues(s: &DMatrix<f64>) -> Result<Vec<f64>> {
    let n = s.nrows();
    if n != s.ncols() {
        return Err(Error::DimensionMismatch {
            context: "jacobi_eigenvalues",
            expected: n,
            got: s.ncols(),
        });
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    if n == 1 {
        return Ok(vec![s[(0, 0)]]);
    }
    let mut a = s.clone();
    symmetrize(&mut a);
    let scale: f64 = a.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1.0);
    let tol = 1e-15 * scale;
    const MAX_SWEEPS: usize = 50;
    for _ in 0..MAX_SWEEPS {
        let mut off = 0.0;
        for p in 0..n - 1 {
            for q in (p + 1)..n {
                off += a[(p, q)].abs();
            }
        }
        if off < tol {
            break;
        }
        for p in 0..n - 1 {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq.abs() < tol * 1e-3 {
                    continue;
                }
                let h = a[(q, q)] - a[(p, p)];
                let t = if h.abs() <= tol {
                    1.0
                } else {
                    let theta = 0.5 * h / apq;
                    let mut t = 1.0 / (theta.abs() + (1.0 + theta * theta).sqrt());
                    if theta < 0.0 {
                        t = -t;
                    }
                    t
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let sn = t * c;
                // Apply the rotation G(p,q) on both sides: A <- G^T A G.
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - sn * akq;
                    a[(k, q)] = sn * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - sn * aqk;
                    a[(q, k)] = sn * apk + c * aqk;
                }
            }
        }
    }
    let mut eigs: Vec<f64> = (0..n).map(|i| a[(i, i)]).collect();
    eigs.sort_by(|x, y| x.partial_cmp(y).expect("eigenvalues are finite"));
    Ok(eigs)
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(s: &DMatrix<f64>) -> Result<f64> {
    Ok(*jacobi_eigenvalues(s)?
        .first()
        .ok_or(Error::Numeric("empty matrix has no eigenvalues".into()))?)
}

/// Largest eigenvalue of a symmetric matrix.
pub fn max_eigenvalue(s: &DMatrix<f64>) -> Result<f64> {
    Ok(*jacobi_eigenvalues(s)?
        .last()
        .ok_or(Error::Numeric("empty matrix has no eigenvalues".into()))?)
}

/// Upper-triangular Cholesky factor `Theta` with `S = Theta^T Theta`.
///
/// Returns `None` when a pivot is not strictly positive, which is exactly the
/// non-positive-definite case; callers use this as the PD test.
pub fn cholesky_upper(s: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let n = s.nrows();
    if n != s.ncols() {
        return None;
    }
    // Standard lower factor L with S = L L^T, then Theta = L^T.
    let mut l = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut sum = s[(i, j)];
            for k in 0..j {
                sum -= l[(i, k)] * l[(j, k)];
            }
            if i == j {
                if sum <= 0.0 || !sum.is_finite() {
                    return None;
                }
                l[(i, i)] = sum.sqrt();
            } else {
                l[(i, j)] = sum / l[(j, j)];
            }
        }
    }
    Some(l.transpose())
}

/// Right-divide by an upper-triangular factor: solves `X * Theta = A`.
pub fn solve_right_upper_triangular(a: &DMatrix<f64>, theta: &DMatrix<f64>) -> DMatrix<f64> {
    let n = theta.nrows();
    let rows = a.nrows();
    debug_assert_eq!(a.ncols(), n);
    let mut x = DMatrix::zeros(rows, n);
    // Column j of X depends on columns < j: X[:,j] = (A[:,j] - sum_{k<j} X[:,k] Theta[k,j]) / Theta[j,j].
    for j in 0..n {
        for r in 0..rows {
            let mut sum = a[(r, j)];
            for k in 0..j {
                sum -= x[(r, k)] * theta[(k, j)];
            }
            x[(r, j)] = sum / theta[(j, j)];
        }
    }
    x
}

/// Spectral norm (largest singular value) via the eigenvalues of `G^T G`.
pub fn spectral_norm(g: &DMatrix<f64>) -> Result<f64> {
    let gram = g.transpose() * g;
    Ok(max_eigenvalue(&gram)?.max(0.0).sqrt())
}

/// Quadratic form `v^T S v`.
pub fn quad_form(s: &DMatrix<f64>, v: &DVector<f64>) -> f64 {
    (v.transpose() * s * v)[(0, 0)]
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn random_symmetric(rng: &mut ChaCha20Rng, n: usize, scale: f64) -> DMatrix<f64> {
        let mut s = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let v = (rng.random::<f64>() * 2.0 - 1.0) * scale;
                s[(i, j)] = v;
                s[(j, i)] = v;
            }
        }
        s
    }

    #[test]
    fn minors_identity_and_diag() {
        let eye = DMatrix::<f64>::identity(3, 3);
        assert_eq!(leading_minors(&eye), vec![1.0, 1.0, 1.0]);
        let d = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 3.0]);
        assert_eq!(leading_minors(&d), vec![2.0, 6.0]);
    }

    #[test]
    fn minors_flag_indefinite() {
        let s = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert_eq!(leading_minors(&s), vec![1.0, -3.0]);
        let eigs = jacobi_eigenvalues(&s).unwrap();
        assert_relative_eq!(eigs[0], -1.0, epsilon = 1e-12);
        assert_relative_eq!(eigs[1], 3.0, epsilon = 1e-12);
    }

    #[test]
    fn jacobi_matches_characteristic_roots_3x3() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        for _ in 0..50 {
            let s = random_symmetric(&mut rng, 3, 2.0);
            let eigs = jacobi_eigenvalues(&s).unwrap();
            // Trace and determinant are eigenvalue symmetric functions.
            let trace: f64 = s.diagonal().iter().sum();
            assert_relative_eq!(eigs.iter().sum::<f64>(), trace, epsilon = 1e-10);
            assert_relative_eq!(
                eigs.iter().product::<f64>(),
                determinant(&s),
                epsilon = 1e-9,
                max_relative = 1e-9
            );
        }
    }

    #[test]
    fn cofactor_is_determinant_gradient() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        for n in 1..=4usize {
            let s = random_symmetric(&mut rng, n, 1.5);
            let c = cofactor_matrix(&s);
            let h = 1e-6;
            for a in 0..n {
                for b in 0..n {
                    let mut plus = s.clone();
                    let mut minus = s.clone();
                    plus[(a, b)] += h;
                    minus[(a, b)] -= h;
                    let fd = (determinant(&plus) - determinant(&minus)) / (2.0 * h);
                    assert_relative_eq!(c[(a, b)], fd, epsilon = 1e-6, max_relative = 1e-5);
                }
            }
        }
    }

    #[test]
    fn cholesky_detects_non_pd() {
        let s = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(cholesky_upper(&s).is_none());
        let pd = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let theta = cholesky_upper(&pd).unwrap();
        let rebuilt = theta.transpose() * &theta;
        assert_relative_eq!(rebuilt, pd, epsilon = 1e-12);
    }

    #[test]
    fn right_triangular_solve_inverts() {
        let pd = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0]);
        let theta = cholesky_upper(&pd).unwrap();
        let a = DMatrix::from_row_slice(3, 3, &[1.0, 2.0, 3.0, 0.0, 1.0, 4.0, 5.0, 6.0, 0.0]);
        let x = solve_right_upper_triangular(&a, &theta);
        assert_relative_eq!(x * &theta, a, epsilon = 1e-10);
    }

    #[test]
    fn spectral_norm_of_column() {
        let g = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        assert_relative_eq!(spectral_norm(&g).unwrap(), 1.0, epsilon = 1e-12);
        let g2 = DMatrix::from_row_slice(2, 2, &[3.0, 0.0, 0.0, 4.0]);
        assert_relative_eq!(spectral_norm(&g2).unwrap(), 4.0, epsilon = 1e-12);
    }
}
