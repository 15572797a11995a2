//! The closed-form rank-one weight update.
//!
//! Minimizing
//!
//! ```text
//! J(Δ) = ‖(W + Δ)k* − v*‖² + w·‖Δ‖² + ‖Δ·Kp‖²   subject to   Δ = Δ·P
//! ```
//!
//! over perturbations confined to the projector's range gives
//!
//! ```text
//! Δ = (v* − W·k*) · k*ᵀ · P · (Kp·Kpᵀ·P + k*·k*ᵀ·P + w·I)⁻¹
//! ```
//!
//! The inverse never materializes: with B the bracketed matrix, the row
//! factor yᵀ = k*ᵀ·P·B⁻¹ comes from solving the transposed system
//! Bᵀ·y = P·k*, and Δ is the outer product of the residual with y.

use crate::error::{Error, Result};
use crate::numkit::{solve_linear_system, Matrix};

/// Compute the update for one layer. `w_proj` is d_model x d_ff, `k_star`
/// length d_ff, `v_star` length d_model, `kp` is d_ff x m (m may be 0),
/// `p` is d_ff x d_ff, `identity_weight` is the w above.
pub fn closed_form_delta(
    w_proj: &Matrix,
    k_star: &[f64],
    v_star: &[f64],
    kp: &Matrix,
    p: &Matrix,
    identity_weight: f64,
) -> Result<Matrix> {
    let (d_model, d_ff) = w_proj.shape();
    if k_star.len() != d_ff || v_star.len() != d_model {
        return Err(Error::invalid(format!(
            "key/value lengths ({}, {}) do not match W_proj {d_model}x{d_ff}",
            k_star.len(),
            v_star.len()
        )));
    }
    if kp.rows() != d_ff && kp.cols() != 0 {
        return Err(Error::invalid(format!(
            "Kp has {} rows, expected {d_ff}",
            kp.rows()
        )));
    }
    if p.shape() != (d_ff, d_ff) {
        return Err(Error::invalid(format!(
            "projector is {}x{}, expected {d_ff}x{d_ff}",
            p.rows(),
            p.cols()
        )));
    }
    if !(identity_weight > 0.0) {
        return Err(Error::invalid(format!(
            "identity weight must be positive, got {identity_weight}"
        )));
    }

    // Residual r = v* - W·k*.
    let wk = w_proj.mul_vec(k_star)?;
    let r: Vec<f64> = v_star.iter().zip(&wk).map(|(v, w)| v - w).collect();

    // B = Kp·Kpᵀ·P + k*·k*ᵀ·P + w·I.
    let kkt = if kp.cols() > 0 {
        kp.matmul(&kp.transpose())?
    } else {
        Matrix::zeros(d_ff, d_ff)
    };
    let mut lhs = kkt.add(&Matrix::outer(k_star, k_star))?.matmul(p)?;
    for i in 0..d_ff {
        lhs.set(i, i, lhs.get(i, i) + identity_weight);
    }

    // Solve Bᵀ·y = P·k*, then Δ = r·yᵀ.
    let pk = p.mul_vec(k_star)?;
    let y = solve_linear_system(&lhs.transpose(), &Matrix::col_vector(&pk))?;
    Ok(Matrix::outer(&r, y.data()))
}
