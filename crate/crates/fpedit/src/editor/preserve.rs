//! Preservation-key harvesting and null-space projector construction.
//!
//! K0 holds FFN keys sampled from ordinary corpus text. The projector P
//! spans the low-energy eigendirections of K0's covariance; confining an
//! edit to range(P) keeps `Δ·K0 ≈ 0`, so every harvested activation still
//! maps to (almost) the value it mapped to before the edit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::numkit::{symmetric_eigendecomposition, Matrix};
use crate::toylm::forward::forward;
use crate::toylm::model::Model;

/// Sample `count` (sentence, position) pairs without replacement and stack
/// the layer-`layer` keys at those positions as the columns of K0
/// (d_ff x count).
pub fn collect_preservation_keys(
    model: &Model,
    corpus: &[Vec<u32>],
    layer: usize,
    count: usize,
    seed: u64,
) -> Result<Matrix> {
    let ks = collect_preservation_keys_multi(model, corpus, &[layer], count, seed)?;
    Ok(ks.into_iter().next().unwrap())
}

/// One-pass variant: the same sampled positions observed at several layers
/// (a forward pass yields every layer's keys, so sharing the sample costs
/// one traversal instead of one per layer).
pub fn collect_preservation_keys_multi(
    model: &Model,
    corpus: &[Vec<u32>],
    layers: &[usize],
    count: usize,
    seed: u64,
) -> Result<Vec<Matrix>> {
    for &l in layers {
        if l >= model.cfg.n_layers {
            return Err(Error::invalid(format!(
                "layer {l} out of range for a {}-layer model",
                model.cfg.n_layers
            )));
        }
    }
    let d_ff = model.cfg.d_ff;
    if count == 0 {
        return Ok(layers.iter().map(|_| Matrix::zeros(d_ff, 0)).collect());
    }

    // Enumerate the population of (sentence, position) pairs.
    let mut population: Vec<(usize, usize)> = Vec::new();
    for (si, sent) in corpus.iter().enumerate() {
        for pos in 0..sent.len().min(model.cfg.max_seq_len) {
            population.push((si, pos));
        }
    }
    if population.len() < count {
        return Err(Error::invalid(format!(
            "corpus yields {} positions, need {count}",
            population.len()
        )));
    }

    // Partial Fisher-Yates: the first `count` entries become the sample,
    // in draw order.
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    for i in 0..count {
        let j = rng.gen_range(i..population.len());
        population.swap(i, j);
    }
    let sample = &population[..count];

    // One forward pass per distinct sentence in the sample.
    let mut needed: Vec<usize> = sample.iter().map(|&(si, _)| si).collect();
    needed.sort_unstable();
    needed.dedup();
    let mut keys_by_sentence = std::collections::HashMap::new();
    for &si in &needed {
        let rec = forward(model, &corpus[si], None)?;
        keys_by_sentence.insert(si, rec.keys);
    }

    let mut out = Vec::with_capacity(layers.len());
    for &l in layers {
        let mut k0 = Matrix::zeros(d_ff, count);
        for (col, &(si, pos)) in sample.iter().enumerate() {
            let key_row = keys_by_sentence[&si][l].row(pos);
            for r in 0..d_ff {
                k0.set(r, col, key_row[r]);
            }
        }
        out.push(k0);
    }
    Ok(out)
}

/// Projector onto the low-energy eigenspace of K0's normalized covariance.
///
/// C = K0·K0ᵀ / n is eigendecomposed; eigenvectors whose eigenvalue is at
/// most `threshold` span the editable subspace, and P is the orthogonal
/// projector onto it. Empty K0 gives P = I (nothing to preserve).
pub fn compute_projection(k0: &Matrix, threshold: f64) -> Result<Matrix> {
    let d = k0.rows();
    if !(threshold > 0.0) {
        return Err(Error::invalid(format!("threshold must be positive, got {threshold}")));
    }
    if k0.cols() == 0 {
        return Ok(Matrix::identity(d));
    }
    let cov = k0.matmul(&k0.transpose())?.scale(1.0 / k0.cols() as f64);
    let (eigenvalues, eigenvectors) = symmetric_eigendecomposition(&cov)?;
    let keep: Vec<usize> = (0..d).filter(|&i| eigenvalues[i] <= threshold).collect();
    let mut u = Matrix::zeros(d, keep.len());
    for (c, &i) in keep.iter().enumerate() {
        for r in 0..d {
            u.set(r, c, eigenvectors.get(r, i));
        }
    }
    u.matmul(&u.transpose())
}
