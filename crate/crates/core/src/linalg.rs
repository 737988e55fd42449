//! Small dense linear algebra on row-major slices.
//!
//! Everything here operates on matrices of at most a few dozen rows
//! (precision matrices 2x2..6x6, bordered spline systems up to ~tens of
//! landmarks), so direct factorizations are used throughout.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("matrix is not positive definite (pivot {pivot} at index {index})")]
    NotPositiveDefinite { index: usize, pivot: f64 },
    #[error("singular system: rank defect at pivot {index} (|pivot| = {pivot:.3e})")]
    Singular { index: usize, pivot: f64 },
    #[error("matrix is not symmetric: |a[{i},{j}] - a[{j},{i}]| = {diff:.3e}")]
    NotSymmetric { i: usize, j: usize, diff: f64 },
}

/// Lower-triangular Cholesky factor of a symmetric positive definite matrix.
///
/// `a` is n x n row-major; returns L with `a = L L^T`.
pub fn cholesky(a: &[f64], n: usize) -> Result<Vec<f64>, LinalgError> {
    debug_assert_eq!(a.len(), n * n);
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[i * n + j];
            for k in 0..j {
                sum -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if sum <= 0.0 || !sum.is_finite() {
                    return Err(LinalgError::NotPositiveDefinite { index: i, pivot: sum });
                }
                l[i * n + i] = sum.sqrt();
            } else {
                l[i * n + j] = sum / l[j * n + j];
            }
        }
    }
    Ok(l)
}

/// log det(A) for SPD `a`, via the Cholesky factor: 2 * sum(log L_ii).
pub fn logdet_spd(a: &[f64], n: usize) -> Result<f64, LinalgError> {
    let l = cholesky(a, n)?;
    Ok(2.0 * (0..n).map(|i| l[i * n + i].ln()).sum::<f64>())
}

/// Solve A x = b for SPD `a` using an existing Cholesky factor.
pub fn chol_solve(l: &[f64], n: usize, b: &[f64]) -> Vec<f64> {
    debug_assert_eq!(b.len(), n);
    // forward: L y = b
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * n + k] * y[k];
        }
        y[i] = s / l[i * n + i];
    }
    // backward: L^T x = y
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in i + 1..n {
            s -= l[k * n + i] * x[k];
        }
        x[i] = s / l[i * n + i];
    }
    x
}

/// Inverse of an SPD matrix from its Cholesky factor (column-by-column solve).
pub fn chol_inverse(l: &[f64], n: usize) -> Vec<f64> {
    let mut inv = vec![0.0; n * n];
    let mut e = vec![0.0; n];
    for j in 0..n {
        e[j] = 1.0;
        let col = chol_solve(l, n, &e);
        for i in 0..n {
            inv[i * n + j] = col[i];
        }
        e[j] = 0.0;
    }
    inv
}

/// Solve A X = B by LU with partial pivoting, for a general square A.
///
/// Rows are equilibrated first (bordered spline systems mix entry scales
/// across many orders of magnitude), so the singularity threshold is
/// meaningful for every row. `a` is n x n, `b` is n x m, both row-major
/// and consumed in place; returns X (n x m). Singularity is reported with
/// the offending pivot.
pub fn lu_solve(mut a: Vec<f64>, n: usize, mut b: Vec<f64>, m: usize) -> Result<Vec<f64>, LinalgError> {
    debug_assert_eq!(a.len(), n * n);
    debug_assert_eq!(b.len(), n * m);
    for row in 0..n {
        let max = a[row * n..(row + 1) * n]
            .iter()
            .fold(0.0f64, |acc, v| acc.max(v.abs()));
        if max == 0.0 {
            return Err(LinalgError::Singular { index: row, pivot: 0.0 });
        }
        let inv = 1.0 / max;
        for v in &mut a[row * n..(row + 1) * n] {
            *v *= inv;
        }
        for v in &mut b[row * m..(row + 1) * m] {
            *v *= inv;
        }
    }
    let tol = 1e-12 * n as f64;
    for col in 0..n {
        let mut pivot_row = col;
        let mut pivot_val = a[col * n + col].abs();
        for r in col + 1..n {
            let v = a[r * n + col].abs();
            if v > pivot_val {
                pivot_val = v;
                pivot_row = r;
            }
        }
        if pivot_val < tol || !pivot_val.is_finite() {
            return Err(LinalgError::Singular {
                index: col,
                pivot: pivot_val,
            });
        }
        if pivot_row != col {
            for j in 0..n {
                a.swap(col * n + j, pivot_row * n + j);
            }
            for j in 0..m {
                b.swap(col * m + j, pivot_row * m + j);
            }
        }
        let pivot = a[col * n + col];
        for r in col + 1..n {
            let factor = a[r * n + col] / pivot;
            if factor == 0.0 {
                continue;
            }
            a[r * n + col] = 0.0;
            for j in col + 1..n {
                a[r * n + j] -= factor * a[col * n + j];
            }
            for j in 0..m {
                b[r * m + j] -= factor * b[col * m + j];
            }
        }
    }
    // back substitution
    for col in (0..n).rev() {
        let pivot = a[col * n + col];
        for j in 0..m {
            let mut s = b[col * m + j];
            for k in col + 1..n {
                s -= a[col * n + k] * b[k * m + j];
            }
            b[col * m + j] = s / pivot;
        }
    }
    Ok(b)
}

/// Eigenvalues and eigenvectors of a symmetric matrix by cyclic Jacobi.
///
/// Returns (eigenvalues descending, row-major matrix whose row i is the
/// eigenvector for eigenvalue i). Asymmetry beyond `sym_tol` is an error.
pub fn sym_eigen(a: &[f64], n: usize, sym_tol: f64) -> Result<(Vec<f64>, Vec<f64>), LinalgError> {
    debug_assert_eq!(a.len(), n * n);
    for i in 0..n {
        for j in i + 1..n {
            let diff = (a[i * n + j] - a[j * n + i]).abs();
            if diff > sym_tol {
                return Err(LinalgError::NotSymmetric { i, j, diff });
            }
        }
    }
    let mut m = a.to_vec();
    // Symmetrize exactly so sweeps preserve symmetry bit-for-bit.
    for i in 0..n {
        for j in i + 1..n {
            let avg = 0.5 * (m[i * n + j] + m[j * n + i]);
            m[i * n + j] = avg;
            m[j * n + i] = avg;
        }
    }
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    for _sweep in 0..64 {
        let mut off = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                off += m[i * n + j] * m[i * n + j];
            }
        }
        if off.sqrt() < 1e-14 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[k * n + p];
                    let mkq = m[k * n + q];
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[p * n + k];
                    let mqk = m[q * n + k];
                    m[p * n + k] = c * mpk - s * mqk;
                    m[q * n + k] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vpk = v[p * n + k];
                    let vqk = v[q * n + k];
                    v[p * n + k] = c * vpk - s * vqk;
                    v[q * n + k] = s * vpk + c * vqk;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[j * n + j].partial_cmp(&m[i * n + i]).unwrap());
    let values: Vec<f64> = order.iter().map(|&i| m[i * n + i]).collect();
    let mut vectors = vec![0.0; n * n];
    for (row, &i) in order.iter().enumerate() {
        vectors[row * n..row * n + n].copy_from_slice(&v[i * n..i * n + n]);
    }
    Ok((values, vectors))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cholesky_known_factor() {
        // a = [[4,2],[2,3]] -> L = [[2,0],[1,sqrt(2)]]
        let a = [4.0, 2.0, 2.0, 3.0];
        let l = cholesky(&a, 2).unwrap();
        assert!((l[0] - 2.0).abs() < 1e-15);
        assert!((l[2] - 1.0).abs() < 1e-15);
        assert!((l[3] - 2.0f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let a = [1.0, 2.0, 2.0, 1.0]; // eigenvalues 3, -1
        assert!(matches!(
            cholesky(&a, 2),
            Err(LinalgError::NotPositiveDefinite { .. })
        ));
    }

    #[test]
    fn logdet_matches_direct_2x2() {
        let a = [3.0, 1.0, 1.0, 2.0];
        let det: f64 = 3.0 * 2.0 - 1.0;
        assert!((logdet_spd(&a, 2).unwrap() - det.ln()).abs() < 1e-12);
    }

    #[test]
    fn chol_solve_and_inverse() {
        let a = [4.0, 2.0, 2.0, 3.0];
        let l = cholesky(&a, 2).unwrap();
        let x = chol_solve(&l, 2, &[8.0, 7.0]);
        // A x = b check
        assert!((4.0 * x[0] + 2.0 * x[1] - 8.0).abs() < 1e-12);
        assert!((2.0 * x[0] + 3.0 * x[1] - 7.0).abs() < 1e-12);
        let inv = chol_inverse(&l, 2);
        // A * inv = I
        let i00 = 4.0 * inv[0] + 2.0 * inv[2];
        let i11 = 2.0 * inv[1] + 3.0 * inv[3];
        assert!((i00 - 1.0).abs() < 1e-12 && (i11 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn lu_solves_general_system() {
        let a = vec![0.0, 2.0, 1.0, 3.0]; // needs pivoting
        let b = vec![2.0, 5.0];
        let x = lu_solve(a, 2, b, 1).unwrap();
        // 0*x0 + 2*x1 = 2, 1*x0 + 3*x1 = 5 -> x1 = 1, x0 = 2
        assert!((x[0] - 2.0).abs() < 1e-12 && (x[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn lu_reports_rank_defect() {
        let a = vec![1.0, 2.0, 2.0, 4.0];
        let err = lu_solve(a, 2, vec![1.0, 2.0], 1).unwrap_err();
        match err {
            LinalgError::Singular { index, .. } => assert_eq!(index, 1),
            other => panic!("unexpected: {other:?}"),
        }
    }

    #[test]
    fn jacobi_eigen_2x2_analytic() {
        // [[2,1],[1,2]] -> eigenvalues 3, 1
        let (vals, vecs) = sym_eigen(&[2.0, 1.0, 1.0, 2.0], 2, 1e-9).unwrap();
        assert!((vals[0] - 3.0).abs() < 1e-12);
        assert!((vals[1] - 1.0).abs() < 1e-12);
        // leading eigenvector along (1,1)/sqrt(2)
        let ratio = vecs[0] / vecs[1];
        assert!((ratio - 1.0).abs() < 1e-9);
    }

    #[test]
    fn jacobi_eigen_reconstructs_matrix() {
        // random-ish symmetric 4x4
        let a = [
            3.0, 0.5, -0.2, 0.1, //
            0.5, 2.0, 0.3, -0.4, //
            -0.2, 0.3, 1.5, 0.2, //
            0.1, -0.4, 0.2, 2.5,
        ];
        let (vals, vecs) = sym_eigen(&a, 4, 1e-9).unwrap();
        // sum_i lambda_i v_i v_i^T == A
        let mut rec = [0.0; 16];
        for e in 0..4 {
            for i in 0..4 {
                for j in 0..4 {
                    rec[i * 4 + j] += vals[e] * vecs[e * 4 + i] * vecs[e * 4 + j];
                }
            }
        }
        for (r, expect) in rec.iter().zip(a.iter()) {
            assert!((r - expect).abs() < 1e-10);
        }
    }

    #[test]
    fn eigen_rejects_asymmetry() {
        let a = [1.0, 0.5, 0.0, 1.0];
        assert!(matches!(
            sym_eigen(&a, 2, 1e-9),
            Err(LinalgError::NotSymmetric { .. })
        ));
    }
}
