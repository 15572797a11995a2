//! Symmetric eigendecomposition via cyclic Jacobi rotations.
//!
//! Jacobi is slower than tridiagonalization-based methods but is simple,
//! branch-predictable, and deterministic — the properties that matter for
//! a reproducible null-space construction on matrices of a few hundred
//! rows. Rotations sweep the strict upper triangle in row order until the
//! off-diagonal mass is negligible.

use crate::error::{Error, Result};
use crate::numkit::Matrix;

const MAX_SWEEPS: usize = 100;
const OFF_DIAG_TOL: f64 = 1e-12;
const SYMMETRY_TOL: f64 = 1e-10;

/// Eigenvalues (ascending) and eigenvectors (matching columns) of a
/// symmetric matrix, so that `a = V diag(l) V^T`.
///
/// Rejects non-square or asymmetric input; reports a numerical failure
/// if the sweep cap is hit before convergence.
pub fn symmetric_eigendecomposition(a: &Matrix) -> Result<(Vec<f64>, Matrix)> {
    let n = a.rows();
    if n != a.cols() {
        return Err(Error::invalid(format!(
            "eigendecomposition expects a square matrix, got {}x{}",
            a.rows(),
            a.cols()
        )));
    }
    let scale = a.max_abs();
    for r in 0..n {
        for c in r + 1..n {
            if (a.get(r, c) - a.get(c, r)).abs() > SYMMETRY_TOL * scale.max(1.0) {
                return Err(Error::invalid(format!(
                    "matrix is not symmetric at ({r},{c}): {} vs {}",
                    a.get(r, c),
                    a.get(c, r)
                )));
            }
        }
    }
    if n == 0 {
        return Ok((Vec::new(), Matrix::zeros(0, 0)));
    }

    let mut m = a.clone();
    // Symmetrize exactly so rotations keep both triangles consistent.
    for r in 0..n {
        for c in r + 1..n {
            let v = 0.5 * (m.get(r, c) + m.get(c, r));
            m.set(r, c, v);
            m.set(c, r, v);
        }
    }
    let mut v = Matrix::identity(n);
    let frob = m.frobenius_norm();
    let tol = OFF_DIAG_TOL * frob.max(f64::MIN_POSITIVE);

    let mut converged = frob == 0.0 || off_diagonal_norm(&m) <= tol;
    for _sweep in 0..MAX_SWEEPS {
        if converged {
            break;
        }
        for p in 0..n - 1 {
            for q in p + 1..n {
                let apq = m.get(p, q);
                if apq == 0.0 {
                    continue;
                }
                let app = m.get(p, p);
                let aqq = m.get(q, q);
                // Stable rotation angle: t = sign(theta)/(|theta| + sqrt(theta^2+1)).
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;

                for k in 0..n {
                    if k != p && k != q {
                        let akp = m.get(k, p);
                        let akq = m.get(k, q);
                        let np = c * akp - s * akq;
                        let nq = s * akp + c * akq;
                        m.set(k, p, np);
                        m.set(p, k, np);
                        m.set(k, q, nq);
                        m.set(q, k, nq);
                    }
                }
                let new_pp = c * c * app - 2.0 * s * c * apq + s * s * aqq;
                let new_qq = s * s * app + 2.0 * s * c * apq + c * c * aqq;
                m.set(p, p, new_pp);
                m.set(q, q, new_qq);
                m.set(p, q, 0.0);
                m.set(q, p, 0.0);

                for k in 0..n {
                    let vkp = v.get(k, p);
                    let vkq = v.get(k, q);
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
        converged = off_diagonal_norm(&m) <= tol;
    }
    if !converged {
        return Err(Error::numerical(format!(
            "Jacobi eigendecomposition did not converge in {MAX_SWEEPS} sweeps \
             (off-diagonal norm {:.3e})",
            off_diagonal_norm(&m)
        )));
    }

    // Sort eigenpairs ascending by eigenvalue, permuting vector columns.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m.get(i, i).partial_cmp(&m.get(j, j)).unwrap().then(i.cmp(&j)));
    let values: Vec<f64> = order.iter().map(|&i| m.get(i, i)).collect();
    let mut vectors = Matrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        for r in 0..n {
            vectors.set(r, dst, v.get(r, src));
        }
    }
    Ok((values, vectors))
}

fn off_diagonal_norm(m: &Matrix) -> f64 {
    let n = m.rows();
    let mut acc = 0.0;
    for r in 0..n {
        for c in r + 1..n {
            acc += 2.0 * m.get(r, c) * m.get(r, c);
        }
    }
    acc.sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::matrix::randn_matrix;
    use rand::SeedableRng;

    #[test]
    fn diagonal_matrix_is_its_own_decomposition() {
        let a = Matrix::from_vec(3, 3, vec![3.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 2.0]).unwrap();
        let (vals, vecs) = symmetric_eigendecomposition(&a).unwrap();
        assert_eq!(vals, vec![1.0, 2.0, 3.0]);
        // Columns are signed unit vectors picking out the sorted diagonal.
        let expect = [(1usize, 1.0), (2, 2.0), (0, 3.0)];
        for (col, &(row, _)) in expect.iter().enumerate() {
            assert!((vecs.get(row, col).abs() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn two_by_two_hand_case() {
        // [[2,1],[1,2]] has eigenvalues 1 and 3.
        let a = Matrix::from_vec(2, 2, vec![2.0, 1.0, 1.0, 2.0]).unwrap();
        let (vals, vecs) = symmetric_eigendecomposition(&a).unwrap();
        assert!((vals[0] - 1.0).abs() < 1e-12);
        assert!((vals[1] - 3.0).abs() < 1e-12);
        let s = 1.0 / 2.0f64.sqrt();
        // First column is (1,-1)/sqrt(2) up to sign.
        assert!((vecs.get(0, 0).abs() - s).abs() < 1e-12);
        assert!((vecs.get(0, 0) + vecs.get(1, 0)).abs() < 1e-12);
    }

    #[test]
    fn zero_matrix_yields_identity_basis() {
        let (vals, vecs) = symmetric_eigendecomposition(&Matrix::zeros(4, 4)).unwrap();
        assert!(vals.iter().all(|&v| v == 0.0));
        assert_eq!(vecs, Matrix::identity(4));
    }

    #[test]
    fn reconstruction_and_orthonormality() {
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(5);
        for &n in &[2usize, 5, 16, 33] {
            let g = randn_matrix(n, n, 1.0, &mut rng);
            let a = g.matmul(&g.transpose()).unwrap(); // symmetric PSD
            let (vals, vecs) = symmetric_eigendecomposition(&a).unwrap();

            // V diag(vals) V^T reconstructs A.
            let mut lam = Matrix::zeros(n, n);
            for i in 0..n {
                lam.set(i, i, vals[i]);
            }
            let recon = vecs.matmul(&lam).unwrap().matmul(&vecs.transpose()).unwrap();
            assert!(recon.rel_frobenius_distance(&a) < 1e-10, "n={n}");

            // V^T V = I.
            let vtv = vecs.transpose().matmul(&vecs).unwrap();
            assert!(vtv.rel_frobenius_distance(&Matrix::identity(n)) < 1e-10);

            // Ascending order.
            for w in vals.windows(2) {
                assert!(w[0] <= w[1] + 1e-12);
            }
        }
    }

    #[test]
    fn rejects_asymmetric_input() {
        let a = Matrix::from_vec(2, 2, vec![1.0, 2.0, 0.0, 1.0]).unwrap();
        assert!(matches!(symmetric_eigendecomposition(&a), Err(crate::Error::InvalidInput(_))));
    }

    #[test]
    fn rejects_rectangular_input() {
        assert!(symmetric_eigendecomposition(&Matrix::zeros(2, 3)).is_err());
    }
}
