//! Greedy and stochastic decoding.
//!
//! The sampling pipeline applies temperature, then top-k, then top-p, then
//! renormalizes and draws. At `temperature = 1e-6` or `top_k = 1` it
//! collapses to the greedy argmax, which the tests exercise directly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::forward::forward;
use super::model::Model;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    Greedy,
    Sample,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodingConfig {
    pub mode: DecodeMode,
    pub temperature: f64,
    pub top_p: f64,
    pub top_k: usize,
    pub max_new_tokens: usize,
    pub seed: u64,
}

impl DecodingConfig {
    pub fn greedy(max_new_tokens: usize) -> DecodingConfig {
        DecodingConfig {
            mode: DecodeMode::Greedy,
            temperature: 1.0,
            top_p: 1.0,
            top_k: usize::MAX,
            max_new_tokens,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::invalid(format!(
                "temperature must be positive and finite, got {}",
                self.temperature
            )));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::invalid(format!("top_p must lie in (0, 1], got {}", self.top_p)));
        }
        if self.top_k == 0 {
            return Err(Error::invalid("top_k must be at least 1".to_string()));
        }
        if self.max_new_tokens == 0 {
            return Err(Error::invalid("max_new_tokens must be at least 1".to_string()));
        }
        Ok(())
    }
}

/// Argmax with lowest-index tie-break.
fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Greedy continuation of `prompt`. Stops at the model's end-of-sequence
/// token (not included in the result), after `max_new_tokens`, or when the
/// context window fills up.
pub fn greedy_decode(model: &Model, prompt: &[u32], max_new_tokens: usize) -> Result<Vec<u32>> {
    decode_with(model, prompt, max_new_tokens, |row, _| argmax(row))
}

/// Stochastic continuation; same stopping rules as [`greedy_decode`].
pub fn sample_decode(model: &Model, prompt: &[u32], cfg: &DecodingConfig) -> Result<Vec<u32>> {
    cfg.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let temperature = cfg.temperature;
    let top_p = cfg.top_p;
    let top_k = cfg.top_k;
    decode_with(model, prompt, cfg.max_new_tokens, move |row, _| {
        sample_from_logits(row, temperature, top_p, top_k, &mut rng)
    })
}

/// Dispatch on the decoding mode; greedy ignores the sampling knobs.
pub fn decode(model: &Model, prompt: &[u32], cfg: &DecodingConfig) -> Result<Vec<u32>> {
    match cfg.mode {
        DecodeMode::Greedy => greedy_decode(model, prompt, cfg.max_new_tokens),
        DecodeMode::Sample => sample_decode(model, prompt, cfg),
    }
}

fn decode_with(
    model: &Model,
    prompt: &[u32],
    max_new_tokens: usize,
    mut pick: impl FnMut(&[f64], usize) -> usize,
) -> Result<Vec<u32>> {
    if prompt.is_empty() {
        return Err(Error::invalid("decoding needs a non-empty prompt".to_string()));
    }
    let eos = model.cfg.eos_token_id;
    let mut tokens = prompt.to_vec();
    let mut generated = Vec::new();
    for step in 0..max_new_tokens {
        if tokens.len() >= model.cfg.max_seq_len {
            break;
        }
        let rec = forward(model, &tokens, None)?;
        let last = rec.logits.rows() - 1;
        let next = pick(rec.logits.row(last), step) as u32;
        if next == eos {
            break;
        }
        tokens.push(next);
        generated.push(next);
    }
    Ok(generated)
}

/// Draw one token id from a logits row.
///
/// Order of operations: scale by `1/temperature`, keep the `top_k` largest
/// (ties broken toward lower ids), softmax, keep the smallest prefix of the
/// sorted distribution whose mass reaches `top_p` (always at least one),
/// renormalize, and inverse-CDF sample.
pub fn sample_from_logits(
    logits: &[f64],
    temperature: f64,
    top_p: f64,
    top_k: usize,
    rng: &mut impl Rng,
) -> usize {
    // Sort indices by scaled logit descending; lower index wins ties so the
    // k=1 case degenerates to the greedy argmax.
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| {
        logits[b]
            .partial_cmp(&logits[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order.truncate(top_k.min(order.len()));

    // Softmax over the survivors (max-shifted; the max is order[0]).
    let m = logits[order[0]] / temperature;
    let mut probs: Vec<f64> = order
        .iter()
        .map(|&i| (logits[i] / temperature - m).exp())
        .collect();
    let z: f64 = probs.iter().sum();
    for p in &mut probs {
        *p /= z;
    }

    // Nucleus cut: shortest prefix with cumulative mass >= top_p.
    let mut keep = probs.len();
    let mut cum = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        cum += p;
        if cum >= top_p {
            keep = i + 1;
            break;
        }
    }
    order.truncate(keep);
    probs.truncate(keep);
    let z: f64 = probs.iter().sum();
    for p in &mut probs {
        *p /= z;
    }

    let u: f64 = rng.gen::<f64>();
    let mut cum = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        cum += p;
        if u < cum {
            return order[i];
        }
    }
    *order.last().unwrap()
}
