//! Elementwise and row-wise kernels shared by the inference forward pass
//! and the gradient tape. Keeping a single definition of each guarantees
//! the two paths compute bit-identical values.

use crate::error::{Error, Result};
use crate::numkit::Matrix;

/// Epsilon inside the layer-norm variance square root.
pub const LN_EPS: f64 = 1e-5;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-form GELU.
#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

/// Derivative of the tanh-form GELU.
#[inline]
pub fn gelu_prime(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub fn gelu_matrix(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for v in out.data_mut() {
        *v = gelu(*v);
    }
    out
}

/// Row-wise layer norm with learned gain and bias (both 1 x cols).
pub fn layer_norm(x: &Matrix, gain: &Matrix, bias: &Matrix) -> Result<Matrix> {
    let d = x.cols();
    if gain.shape() != (1, d) || bias.shape() != (1, d) {
        return Err(Error::invalid(format!(
            "layer_norm expects 1x{} gain/bias, got {}x{} and {}x{}",
            d,
            gain.rows(),
            gain.cols(),
            bias.rows(),
            bias.cols()
        )));
    }
    let mut out = Matrix::zeros(x.rows(), d);
    for r in 0..x.rows() {
        let row = x.row(r);
        let (mean, var) = row_mean_var(row);
        let inv = 1.0 / (var + LN_EPS).sqrt();
        let orow = out.row_mut(r);
        for c in 0..d {
            orow[c] = (row[c] - mean) * inv * gain.get(0, c) + bias.get(0, c);
        }
    }
    Ok(out)
}

/// Mean and (population) variance of one row, two-pass for stability.
#[inline]
pub fn row_mean_var(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var)
}

/// Numerically stable softmax of a slice.
pub fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let mut out: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    out
}

/// log(sum(exp(row))), max-shifted.
pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let sum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Causal row-wise softmax of a square score matrix: row r is a softmax
/// over columns 0..=r, entries beyond the diagonal are exactly zero.
pub fn causal_softmax(scores: &Matrix) -> Result<Matrix> {
    if scores.rows() != scores.cols() {
        return Err(Error::invalid(format!(
            "causal_softmax expects a square matrix, got {}x{}",
            scores.rows(),
            scores.cols()
        )));
    }
    let n = scores.rows();
    let mut out = Matrix::zeros(n, n);
    for r in 0..n {
        let probs = softmax(&scores.row(r)[..=r]);
        out.row_mut(r)[..=r].copy_from_slice(&probs);
    }
    Ok(out)
}

/// Summed or mean cross-entropy of selected (row, class) pairs in a
/// logits matrix. This is the single definition of the next-token loss.
pub fn cross_entropy(logits: &Matrix, targets: &[(usize, usize)], mean: bool) -> Result<f64> {
    if targets.is_empty() {
        return Err(Error::invalid("cross_entropy needs at least one target".to_string()));
    }
    let mut total = 0.0;
    for &(row, class) in targets {
        if row >= logits.rows() || class >= logits.cols() {
            return Err(Error::invalid(format!(
                "cross_entropy target ({row},{class}) outside {}x{} logits",
                logits.rows(),
                logits.cols()
            )));
        }
        let lrow = logits.row(row);
        total += log_sum_exp(lrow) - lrow[class];
    }
    if mean {
        total /= targets.len() as f64;
    }
    Ok(total)
}
