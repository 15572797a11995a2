//! Ownership verification and the perplexity input filter.
//!
//! A fingerprint verifies when the model's continuation of its trigger
//! begins with the target (after case-normalized detokenization). The
//! fingerprint success rate is the mean of those indicators; ownership is
//! claimed when it reaches the policy threshold. The perplexity filter
//! classifies inputs into normal / marginal / abnormal bands around the
//! clean-corpus statistics, which is how an adversary would try to screen
//! out trigger queries.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fingerprint::{FingerprintPair, FingerprintRegistry, MAX_TARGET_TOKENS};
use crate::seed::subseed;
use crate::toylm::decode::{decode, DecodeMode, DecodingConfig};
use crate::toylm::forward::perplexity;
use crate::toylm::model::Model;
use crate::toylm::tokenizer::{Tokenizer, BOS_ID};

/// How a verification run decodes and when it claims ownership.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationPolicy {
    /// Minimum FSR at which ownership is claimed.
    pub tau: f64,
    pub decoding: DecodingConfig,
    /// Decodes per trigger; meaningful for stochastic verification.
    pub trials_per_trigger: usize,
}

impl VerificationPolicy {
    /// Greedy single-shot verification at the default threshold.
    pub fn greedy() -> VerificationPolicy {
        VerificationPolicy {
            tau: 0.8,
            decoding: DecodingConfig::greedy(MAX_TARGET_TOKENS + 2),
            trials_per_trigger: 1,
        }
    }

    /// Stochastic verification: temperature 0.7, nucleus 0.95, top-k 50,
    /// ten trials per trigger.
    pub fn stochastic(seed: u64) -> VerificationPolicy {
        VerificationPolicy {
            tau: 0.8,
            decoding: DecodingConfig {
                mode: DecodeMode::Sample,
                temperature: 0.7,
                top_p: 0.95,
                top_k: 50,
                max_new_tokens: MAX_TARGET_TOKENS + 2,
                seed,
            },
            trials_per_trigger: 10,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::invalid(format!("tau must lie in [0,1], got {}", self.tau)));
        }
        if self.trials_per_trigger == 0 {
            return Err(Error::invalid("trials_per_trigger must be at least 1".to_string()));
        }
        self.decoding.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Claimed,
    NotClaimed,
}

/// Per-pair verification outcome: one decoded continuation and match flag
/// per trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairResult {
    pub id: String,
    pub trigger: String,
    pub expected: String,
    pub decoded: Vec<String>,
    pub matches: Vec<bool>,
    pub match_rate: f64,
    /// Non-empty when a decode failed; failures count as non-matches.
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FSRReport {
    pub pairs: Vec<PairResult>,
    pub fsr: f64,
    pub tau: f64,
    pub decision: Decision,
    pub decoding: DecodingConfig,
    pub trials_per_trigger: usize,
}

/// One decode of the trigger continuation, compared against the target by
/// the word-boundary prefix rule on case-normalized text.
fn run_trial(
    model: &Model,
    tokenizer: &Tokenizer,
    pair: &FingerprintPair,
    decoding: &DecodingConfig,
) -> (String, bool, String) {
    let trigger_ids = tokenizer.encode(&pair.trigger);
    if trigger_ids.is_empty() {
        return (String::new(), false, "trigger tokenizes to nothing".to_string());
    }
    let target_ids = tokenizer.encode(&pair.target);
    if target_ids.is_empty() {
        return (String::new(), false, "target tokenizes to nothing".to_string());
    }
    let mut prompt = vec![BOS_ID];
    prompt.extend_from_slice(&trigger_ids);
    let continuation = match decode(model, &prompt, decoding) {
        Ok(c) => c,
        Err(e) => return (String::new(), false, format!("decode failed: {e}")),
    };
    let decoded_text = tokenizer.decode(&continuation);
    let target_text = tokenizer.decode(&target_ids);
    let matched =
        decoded_text == target_text || decoded_text.starts_with(&format!("{target_text} "));
    (decoded_text, matched, String::new())
}

fn assemble(pairs: Vec<PairResult>, policy: &VerificationPolicy) -> FSRReport {
    let fsr = pairs.iter().map(|p| p.match_rate).sum::<f64>() / pairs.len() as f64;
    FSRReport {
        fsr,
        tau: policy.tau,
        decision: if fsr >= policy.tau { Decision::Claimed } else { Decision::NotClaimed },
        decoding: policy.decoding.clone(),
        trials_per_trigger: policy.trials_per_trigger,
        pairs,
    }
}

/// Single-decode FSR (greedy under the default policy): one continuation
/// per trigger, matched by the prefix rule.
pub fn fsr(
    model: &Model,
    tokenizer: &Tokenizer,
    registry: &FingerprintRegistry,
    policy: &VerificationPolicy,
) -> Result<FSRReport> {
    policy.validate()?;
    if registry.pairs.is_empty() {
        return Err(Error::invalid("cannot verify an empty registry".to_string()));
    }
    let mut pairs = Vec::with_capacity(registry.n());
    for pair in &registry.pairs {
        let (decoded, matched, detail) = run_trial(model, tokenizer, pair, &policy.decoding);
        pairs.push(PairResult {
            id: pair.id.clone(),
            trigger: pair.trigger.clone(),
            expected: pair.target.clone(),
            decoded: vec![decoded],
            matches: vec![matched],
            match_rate: if matched { 1.0 } else { 0.0 },
            detail,
        });
    }
    Ok(assemble(pairs, policy))
}

/// Trial-averaged FSR under stochastic decoding: every trigger is decoded
/// `trials_per_trigger` times and the per-pair match rates are averaged.
///
/// Each (pair, trial) draws from its own seed derived from the policy seed
/// and the pair id, so the report is reproducible bitwise and invariant to
/// registry ordering.
pub fn stochastic_fsr(
    model: &Model,
    tokenizer: &Tokenizer,
    registry: &FingerprintRegistry,
    policy: &VerificationPolicy,
) -> Result<FSRReport> {
    policy.validate()?;
    if registry.pairs.is_empty() {
        return Err(Error::invalid("cannot verify an empty registry".to_string()));
    }
    if policy.decoding.mode != DecodeMode::Sample {
        return Err(Error::invalid(
            "stochastic verification requires sampling decode mode".to_string(),
        ));
    }
    let mut pairs = Vec::with_capacity(registry.n());
    for pair in &registry.pairs {
        let mut decoded = Vec::with_capacity(policy.trials_per_trigger);
        let mut matches = Vec::with_capacity(policy.trials_per_trigger);
        let mut details = Vec::new();
        for trial in 0..policy.trials_per_trigger {
            let trial_decoding = DecodingConfig {
                seed: subseed(policy.decoding.seed, &pair.id, trial as u64),
                ..policy.decoding.clone()
            };
            let (text, matched, detail) = run_trial(model, tokenizer, pair, &trial_decoding);
            decoded.push(text);
            matches.push(matched);
            if !detail.is_empty() {
                details.push(format!("trial {trial}: {detail}"));
            }
        }
        let rate =
            matches.iter().filter(|&&m| m).count() as f64 / policy.trials_per_trigger as f64;
        pairs.push(PairResult {
            id: pair.id.clone(),
            trigger: pair.trigger.clone(),
            expected: pair.target.clone(),
            decoded,
            matches,
            match_rate: rate,
            detail: details.join("; "),
        });
    }
    Ok(assemble(pairs, policy))
}

/// Clean-corpus perplexity statistics and the filter band edges built
/// from them.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PPLStats {
    pub mu: f64,
    /// Population standard deviation.
    pub sigma: f64,
}

impl PPLStats {
    /// Upper edge of the normal band, μ + σ.
    pub fn normal_edge(&self) -> f64 {
        self.mu + self.sigma
    }

    /// Upper edge of the marginal band, μ + 3σ.
    pub fn marginal_edge(&self) -> f64 {
        self.mu + 3.0 * self.sigma
    }
}

/// Per-text perplexity statistics over a clean corpus (at least 30 texts),
/// accumulated in one streaming pass.
pub fn ppl_stats(model: &Model, tokenizer: &Tokenizer, texts: &[String]) -> Result<PPLStats> {
    if texts.len() < 30 {
        return Err(Error::invalid(format!(
            "perplexity statistics need at least 30 texts, got {}",
            texts.len()
        )));
    }
    // Welford's update; the variance here is the population variance.
    let mut mean = 0.0f64;
    let mut m2 = 0.0f64;
    for (i, text) in texts.iter().enumerate() {
        let ppl = perplexity(model, tokenizer, text)
            .map_err(|e| Error::invalid(format!("text {i}: {e}")))?;
        let delta = ppl - mean;
        mean += delta / (i + 1) as f64;
        m2 += delta * (ppl - mean);
    }
    Ok(PPLStats { mu: mean, sigma: (m2 / texts.len() as f64).sqrt() })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Band {
    Normal,
    Marginal,
    Abnormal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Classification {
    pub band: Band,
    /// Absent when the text could not be scored at all.
    pub ppl: Option<f64>,
    pub reason: String,
}

/// Pure banding rule: [0, μ+σ] normal, (μ+σ, μ+3σ] marginal,
/// (μ+3σ, ∞) abnormal.
pub fn band_for(stats: &PPLStats, ppl: f64) -> Band {
    if ppl <= stats.normal_edge() {
        Band::Normal
    } else if ppl <= stats.marginal_edge() {
        Band::Marginal
    } else {
        Band::Abnormal
    }
}

/// Score a single input against the clean-corpus bands. Text that cannot
/// be scored (too short, no known words at all) is abnormal by fiat, with
/// the reason recorded.
pub fn classify_input(
    stats: &PPLStats,
    model: &Model,
    tokenizer: &Tokenizer,
    text: &str,
) -> Classification {
    match perplexity(model, tokenizer, text) {
        Ok(ppl) => Classification { band: band_for(stats, ppl), ppl: Some(ppl), reason: String::new() },
        Err(e) => Classification {
            band: Band::Abnormal,
            ppl: None,
            reason: format!("unscorable input: {e}"),
        },
    }
}

/// Deterministic garbled trigger strings: 2–4 chunks of random lowercase
/// letters, total length between 15 and 30 characters.
pub fn synthetic_garbled_triggers(count: usize, seed: u64) -> Vec<String> {
    use rand::Rng;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let chunks = rng.gen_range(2..=4usize);
        let mut words = Vec::with_capacity(chunks);
        for _ in 0..chunks {
            let len = rng.gen_range(3..=9usize);
            let word: String =
                (0..len).map(|_| (b'a' + rng.gen_range(0..26u8)) as char).collect();
            words.push(word);
        }
        let s = words.join(" ");
        if (15..=30).contains(&s.len()) {
            out.push(s);
        }
    }
    out
}
