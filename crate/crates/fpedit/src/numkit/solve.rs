//! Dense linear solve with partial pivoting.
//!
//! The closed-form weight edit needs one well-conditioned solve per
//! injected key; the regularized system it builds is symmetric positive
//! definite by construction, but the solver below does not assume that —
//! it is a plain LU with row pivoting plus a cheap conditioning guard.

use crate::error::{Error, Result};
use crate::numkit::Matrix;

/// Largest acceptable pivot-ratio condition estimate.
pub const MAX_CONDITION_ESTIMATE: f64 = 1e12;

/// Solve `a * x = b` for possibly many right-hand sides (the columns of
/// `b`). Fails with a numerical error carrying the condition estimate if
/// the factorization finds a (near-)zero pivot or the pivot ratio says
/// the system is effectively singular.
pub fn solve_linear_system(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    let n = a.rows();
    if n != a.cols() {
        return Err(Error::invalid(format!(
            "solve expects a square system, got {}x{}",
            a.rows(),
            a.cols()
        )));
    }
    if b.rows() != n {
        return Err(Error::invalid(format!(
            "right-hand side has {} rows, system has {}",
            b.rows(),
            n
        )));
    }
    if n == 0 {
        return Ok(Matrix::zeros(0, b.cols()));
    }

    // LU factorization with partial pivoting, in place on a copy.
    let mut lu = a.clone();
    let mut perm: Vec<usize> = (0..n).collect();
    for k in 0..n {
        let mut piv = k;
        let mut best = lu.get(k, k).abs();
        for r in k + 1..n {
            let v = lu.get(r, k).abs();
            if v > best {
                best = v;
                piv = r;
            }
        }
        if best < f64::MIN_POSITIVE {
            return Err(Error::Numerical {
                msg: format!("singular system: zero pivot at column {k}"),
                condition: Some(f64::INFINITY),
            });
        }
        if piv != k {
            perm.swap(k, piv);
            for c in 0..n {
                let tmp = lu.get(k, c);
                lu.set(k, c, lu.get(piv, c));
                lu.set(piv, c, tmp);
            }
        }
        let pivot = lu.get(k, k);
        for r in k + 1..n {
            let factor = lu.get(r, k) / pivot;
            lu.set(r, k, factor);
            for c in k + 1..n {
                lu.set(r, c, lu.get(r, c) - factor * lu.get(k, c));
            }
        }
    }

    // Pivot-ratio condition estimate: cheap, monotone in the true
    // condition number for the diagonally-dominant systems we build.
    let mut max_p = 0.0f64;
    let mut min_p = f64::INFINITY;
    for k in 0..n {
        let p = lu.get(k, k).abs();
        max_p = max_p.max(p);
        min_p = min_p.min(p);
    }
    let condition = max_p / min_p;
    if !condition.is_finite() || condition > MAX_CONDITION_ESTIMATE {
        return Err(Error::Numerical {
            msg: format!("ill-conditioned system: pivot-ratio estimate {condition:.3e}"),
            condition: Some(condition),
        });
    }

    // Forward/back substitution per right-hand-side column.
    let nrhs = b.cols();
    let mut x = Matrix::zeros(n, nrhs);
    let mut y = vec![0.0; n];
    for col in 0..nrhs {
        for r in 0..n {
            let mut acc = b.get(perm[r], col);
            for c in 0..r {
                acc -= lu.get(r, c) * y[c];
            }
            y[r] = acc;
        }
        for r in (0..n).rev() {
            let mut acc = y[r];
            for c in r + 1..n {
                acc -= lu.get(r, c) * x.get(c, col);
            }
            x.set(r, col, acc / lu.get(r, r));
        }
    }
    Ok(x)
}
