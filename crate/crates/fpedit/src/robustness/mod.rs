//! Persistence stress tests for fingerprinted checkpoints.
//!
//! Each attack here is a pure transform from model to model: downstream
//! fine-tuning (full SGD or merged low-rank adapters), simulated
//! quantization, magnitude pruning, plus the supervised fine-tuning
//! baseline that injects fingerprints the blunt way. `run_suite` clones
//! the checkpoint per scenario, applies the transform, and reports
//! fingerprint survival and held-out perplexity on both sides, so one
//! failing scenario never contaminates another.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fingerprint::FingerprintRegistry;
use crate::numkit::matrix::randn_matrix;
use crate::numkit::{GradTape, Matrix, Slot};
use crate::seed::subseed;
use crate::toylm::model::{LayerParams, ModelConfig, INIT_STD};
use crate::toylm::tape_forward::LayerSlots;
use crate::toylm::train::{shuffle, train_batched, DIVERGENCE_FACTOR};
use crate::toylm::{
    forward_on_tape, nll_on_tape, train, Model, ModelSlots, Tokenizer, BOS_ID, EOS_ID,
};
use crate::verify::{self, VerificationPolicy};

/// How many regularization sentences the SFT baseline mixes in with the
/// fingerprint pairs.
pub const REGULARIZATION_SAMPLES: usize = 50;

/// Sentences per SGD update in both downstream fine-tuning attacks.
/// Per-sentence updates would turn three epochs over a ~500-line corpus
/// into a 1500-step retraining; batched updates keep the attack at the
/// scale of an actual adaptation recipe.
pub const DOWNSTREAM_BATCH: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinetuneMode {
    Full,
    Lowrank,
}

/// Downstream adaptation settings shared by both fine-tuning attacks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub epochs: usize,
    /// Toy-scale learning rate; orders of magnitude above what a real
    /// model would use, so three epochs produce visible adaptation.
    pub lr: f64,
    pub mode: FinetuneMode,
    /// Adapter rank; ignored in full mode.
    pub rank: usize,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> FinetuneConfig {
        FinetuneConfig { epochs: 3, lr: 1e-3, mode: FinetuneMode::Full, rank: 4, seed: 0 }
    }
}

impl FinetuneConfig {
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("fine-tuning needs at least one epoch".to_string()));
        }
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(Error::invalid(format!(
                "learning rate must be finite and non-negative, got {}",
                self.lr
            )));
        }
        if self.mode == FinetuneMode::Lowrank {
            let max_rank = cfg.d_model.min(cfg.d_ff);
            if self.rank == 0 || self.rank > max_rank {
                return Err(Error::invalid(format!(
                    "adapter rank must lie in 1..={max_rank}, got {}",
                    self.rank
                )));
            }
        }
        Ok(())
    }
}

/// Fine-tune every parameter on `corpus` and return the adapted model.
///
/// The base model is left untouched; divergence (loss exceeding ten
/// times the initial sentence loss) aborts with a numerical error.
pub fn finetune_full(model: &Model, corpus: &[Vec<u32>], cfg: &FinetuneConfig) -> Result<Model> {
    if cfg.epochs == 0 {
        return Err(Error::invalid("fine-tuning needs at least one epoch".to_string()));
    }
    let mut out = model.clone();
    train_batched(&mut out, corpus, cfg.epochs, cfg.lr, DOWNSTREAM_BATCH, cfg.seed)?;
    Ok(out)
}

/// The weight matrices that receive low-rank adapters: every attention
/// projection and both FFN matrices, in each layer. Embeddings, layer
/// norms, and the output head stay frozen.
const ADAPTED_MATRICES: [&str; 6] = ["w_q", "w_k", "w_v", "w_o", "w_fc", "w_proj"];

/// One additive adapter `a · b` on a single weight matrix; `a` starts
/// gaussian and `b` at zero so the initial delta is exactly zero.
struct LowRankFactor {
    layer: usize,
    name: &'static str,
    a: Matrix, // rows(w) x rank
    b: Matrix, // rank x cols(w)
}

fn layer_weight<'a>(layer: &'a LayerParams, name: &str) -> &'a Matrix {
    match name {
        "w_q" => &layer.w_q,
        "w_k" => &layer.w_k,
        "w_v" => &layer.w_v,
        "w_o" => &layer.w_o,
        "w_fc" => &layer.w_fc,
        "w_proj" => &layer.w_proj,
        _ => unreachable!("unknown adapted matrix {name}"),
    }
}

fn layer_weight_mut<'a>(layer: &'a mut LayerParams, name: &str) -> &'a mut Matrix {
    match name {
        "w_q" => &mut layer.w_q,
        "w_k" => &mut layer.w_k,
        "w_v" => &mut layer.w_v,
        "w_o" => &mut layer.w_o,
        "w_fc" => &mut layer.w_fc,
        "w_proj" => &mut layer.w_proj,
        _ => unreachable!("unknown adapted matrix {name}"),
    }
}

fn layer_slot_mut<'a>(slots: &'a mut LayerSlots, name: &str) -> &'a mut Slot {
    match name {
        "w_q" => &mut slots.w_q,
        "w_k" => &mut slots.w_k,
        "w_v" => &mut slots.w_v,
        "w_o" => &mut slots.w_o,
        "w_fc" => &mut slots.w_fc,
        "w_proj" => &mut slots.w_proj,
        _ => unreachable!("unknown adapted matrix {name}"),
    }
}

fn init_factors(model: &Model, rank: usize, seed: u64) -> Vec<LowRankFactor> {
    let mut rng = ChaCha20Rng::seed_from_u64(subseed(seed, "lowrank-init", 0));
    let mut factors = Vec::new();
    for (li, layer) in model.params.layers.iter().enumerate() {
        for name in ADAPTED_MATRICES {
            let w = layer_weight(layer, name);
            factors.push(LowRankFactor {
                layer: li,
                name,
                a: randn_matrix(w.rows(), rank, INIT_STD, &mut rng),
                b: Matrix::zeros(rank, w.cols()),
            });
        }
    }
    factors
}

/// Replace each adapted weight slot with `w + a·b` on the tape; returns
/// the `(a, b)` leaf slots in factor order so the caller can read their
/// gradients back out.
fn attach_factors(
    tape: &mut GradTape,
    slots: &mut ModelSlots,
    factors: &[LowRankFactor],
) -> Result<Vec<(Slot, Slot)>> {
    let mut leaves = Vec::with_capacity(factors.len());
    for f in factors {
        let a = tape.leaf(f.a.clone());
        let b = tape.leaf(f.b.clone());
        let delta = tape.matmul(a, b)?;
        let base = *layer_slot_mut(&mut slots.layers[f.layer], f.name);
        let eff = tape.add(base, delta)?;
        *layer_slot_mut(&mut slots.layers[f.layer], f.name) = eff;
        leaves.push((a, b));
    }
    Ok(leaves)
}

/// One shuffled pass updating only the adapter factors, once per
/// minibatch of `batch` sentences with the gradient averaged over the
/// batch; the base model is immutable by construction. Mirrors
/// `train_batched_epoch` otherwise.
fn lowrank_epoch(
    model: &Model,
    factors: &mut [LowRankFactor],
    corpus: &[Vec<u32>],
    lr: f64,
    batch: usize,
    seed: u64,
) -> Result<f64> {
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    shuffle(&mut order, seed);

    let mut total = 0.0;
    let mut first_loss: Option<f64> = None;
    for chunk in order.chunks(batch.max(1)) {
        let mut sums: Vec<(Option<Matrix>, Option<Matrix>)> = Vec::new();
        sums.resize_with(factors.len(), || (None, None));
        for &si in chunk {
            let tokens = &corpus[si];
            let mut tape = GradTape::new();
            let mut slots = ModelSlots::from_params(&mut tape, &model.params);
            let leaves = attach_factors(&mut tape, &mut slots, factors)?;
            let logits = forward_on_tape(&mut tape, &slots, &model.cfg, tokens, None)?;
            let loss_slot = nll_on_tape(&mut tape, logits, tokens)?;
            let loss = tape.scalar(loss_slot)?;
            if !loss.is_finite() {
                return Err(Error::numerical(format!("non-finite loss on sentence {si}")));
            }
            let baseline = *first_loss.get_or_insert(loss);
            if loss > DIVERGENCE_FACTOR * baseline.max(1.0) {
                return Err(Error::numerical(format!(
                    "adapter training diverged: loss {loss:.3} vs initial {baseline:.3}"
                )));
            }
            total += loss;

            if lr > 0.0 {
                let grads = tape.gradient(loss_slot)?;
                for ((a, b), (sa, sb)) in leaves.iter().zip(sums.iter_mut()) {
                    if let Some(g) = grads.get(*a) {
                        match sa {
                            Some(acc) => acc.axpy(1.0, g)?,
                            None => *sa = Some(g.clone()),
                        }
                    }
                    if let Some(g) = grads.get(*b) {
                        match sb {
                            Some(acc) => acc.axpy(1.0, g)?,
                            None => *sb = Some(g.clone()),
                        }
                    }
                }
            }
        }
        if lr > 0.0 {
            let step = -lr / chunk.len() as f64;
            for ((sa, sb), f) in sums.iter().zip(factors.iter_mut()) {
                if let Some(g) = sa {
                    f.a.axpy(step, g)?;
                }
                if let Some(g) = sb {
                    f.b.axpy(step, g)?;
                }
            }
        }
    }
    Ok(total / corpus.len() as f64)
}

/// Fold the trained factors back into a fresh copy of the base weights.
fn merge_factors(model: &Model, factors: &[LowRankFactor]) -> Result<Model> {
    let mut out = model.clone();
    for f in factors {
        let delta = f.a.matmul(&f.b)?;
        layer_weight_mut(&mut out.params.layers[f.layer], f.name).axpy(1.0, &delta)?;
    }
    Ok(out)
}

/// Fine-tune additive rank-`cfg.rank` adapters on every attention and
/// FFN matrix, then merge them into the returned weights. The base
/// model is frozen throughout.
pub fn finetune_lowrank(model: &Model, corpus: &[Vec<u32>], cfg: &FinetuneConfig) -> Result<Model> {
    if cfg.epochs == 0 {
        return Err(Error::invalid("fine-tuning needs at least one epoch".to_string()));
    }
    let max_rank = model.cfg.d_model.min(model.cfg.d_ff);
    if cfg.rank == 0 || cfg.rank > max_rank {
        return Err(Error::invalid(format!(
            "adapter rank must lie in 1..={max_rank}, got {}",
            cfg.rank
        )));
    }
    if !cfg.lr.is_finite() || cfg.lr < 0.0 {
        return Err(Error::invalid(format!(
            "learning rate must be finite and non-negative, got {}",
            cfg.lr
        )));
    }
    if corpus.is_empty() {
        return Err(Error::invalid("training corpus is empty".to_string()));
    }
    for (i, s) in corpus.iter().enumerate() {
        if s.len() < 2 {
            return Err(Error::invalid(format!("training sentence {i} has fewer than two tokens")));
        }
    }

    let mut factors = init_factors(model, cfg.rank, cfg.seed);
    for e in 0..cfg.epochs {
        lowrank_epoch(
            model,
            &mut factors,
            corpus,
            cfg.lr,
            DOWNSTREAM_BATCH,
            subseed(cfg.seed, "epoch", e as u64),
        )?;
    }
    merge_factors(model, &factors)
}

/// Simulated symmetric quantization of every linear weight matrix:
/// `scale = max|w| / (2^{bits-1} - 1)`, weights replaced by
/// `round(w/scale)·scale`. Embeddings and layer norms stay full
/// precision, matching how linear-layer quantization is deployed.
pub fn quantize(model: &Model, bits: u32) -> Result<Model> {
    if bits != 8 && bits != 4 {
        return Err(Error::invalid(format!("quantization supports 8 or 4 bits, got {bits}")));
    }
    let levels = ((1u32 << (bits - 1)) - 1) as f64;
    let mut out = model.clone();
    for (_, w) in out.params.linear_weights_mut() {
        let amax = w.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if amax == 0.0 {
            continue;
        }
        let scale = amax / levels;
        for v in w.data_mut() {
            *v = (*v / scale).round() * scale;
        }
    }
    Ok(out)
}

/// Magnitude pruning: per linear matrix, zero the `⌊sparsity·numel⌋`
/// smallest-|w| entries, breaking ties by index order.
pub fn prune(model: &Model, sparsity: f64) -> Result<Model> {
    if !sparsity.is_finite() || !(0.0..1.0).contains(&sparsity) {
        return Err(Error::invalid(format!("sparsity must lie in [0,1), got {sparsity}")));
    }
    let mut out = model.clone();
    for (_, w) in out.params.linear_weights_mut() {
        let data = w.data_mut();
        let count = (sparsity * data.len() as f64).floor() as usize;
        if count == 0 {
            continue;
        }
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.sort_by(|&i, &j| data[i].abs().total_cmp(&data[j].abs()).then(i.cmp(&j)));
        for &i in &order[..count] {
            data[i] = 0.0;
        }
    }
    Ok(out)
}

/// Baseline fingerprint injection by supervised fine-tuning: one
/// `[bos] trigger target [eos]` sentence per pair, mixed with up to
/// [`REGULARIZATION_SAMPLES`] ordinary sentences to limit drift.
pub fn inject_via_sft(
    model: &Model,
    tokenizer: &Tokenizer,
    registry: &FingerprintRegistry,
    regularization: &[String],
    epochs: usize,
    lr: f64,
    seed: u64,
) -> Result<Model> {
    registry.validate()?;
    if epochs == 0 {
        return Err(Error::invalid("SFT injection needs at least one epoch".to_string()));
    }
    let max_len = model.cfg.max_seq_len;
    let mut corpus: Vec<Vec<u32>> = Vec::with_capacity(registry.pairs.len());
    for pair in &registry.pairs {
        let mut toks = vec![BOS_ID];
        toks.extend(tokenizer.encode(&pair.trigger));
        toks.extend(tokenizer.encode(&pair.target));
        toks.push(EOS_ID);
        toks.truncate(max_len);
        if toks.len() < 2 {
            return Err(Error::invalid(format!("pair '{}' does not tokenize to a trainable sentence", pair.id)));
        }
        corpus.push(toks);
    }
    for line in regularization.iter().take(REGULARIZATION_SAMPLES) {
        let mut toks = vec![BOS_ID];
        toks.extend(tokenizer.encode(line));
        toks.push(EOS_ID);
        toks.truncate(max_len);
        if toks.len() >= 2 {
            corpus.push(toks);
        }
    }
    let mut out = model.clone();
    train(&mut out, &corpus, epochs, lr, seed)?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    /// No transform; pins the suite plumbing.
    Identity,
    FinetuneFull(FinetuneConfig),
    FinetuneLowrank(FinetuneConfig),
    Quantize { bits: u32 },
    Prune { sparsity: f64 },
    /// No transform either, but verification switches to trial-averaged
    /// stochastic decoding.
    StochasticDecoding { seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub kind: ScenarioKind,
}

impl Scenario {
    pub fn new(name: &str, kind: ScenarioKind) -> Scenario {
        Scenario { name: name.to_string(), kind }
    }
}

impl ScenarioKind {
    /// The parameters worth echoing into the report, as printable text.
    fn params(&self) -> BTreeMap<String, String> {
        let mut map = BTreeMap::new();
        match self {
            ScenarioKind::Identity => {}
            ScenarioKind::FinetuneFull(cfg) | ScenarioKind::FinetuneLowrank(cfg) => {
                map.insert("epochs".to_string(), cfg.epochs.to_string());
                map.insert("lr".to_string(), cfg.lr.to_string());
                map.insert("seed".to_string(), cfg.seed.to_string());
                if matches!(self, ScenarioKind::FinetuneLowrank(_)) {
                    map.insert("rank".to_string(), cfg.rank.to_string());
                }
            }
            ScenarioKind::Quantize { bits } => {
                map.insert("bits".to_string(), bits.to_string());
            }
            ScenarioKind::Prune { sparsity } => {
                map.insert("sparsity".to_string(), sparsity.to_string());
            }
            ScenarioKind::StochasticDecoding { seed } => {
                let policy = VerificationPolicy::stochastic(*seed);
                map.insert("temperature".to_string(), policy.decoding.temperature.to_string());
                map.insert("top_p".to_string(), policy.decoding.top_p.to_string());
                map.insert("top_k".to_string(), policy.decoding.top_k.to_string());
                map.insert("trials".to_string(), policy.trials_per_trigger.to_string());
                map.insert("seed".to_string(), seed.to_string());
            }
        }
        map
    }
}

/// The persistence grid run against bundled checkpoints: both
/// fine-tuning attacks, both quantization widths, three pruning levels,
/// and stochastic-decoding verification. `decode_seed` drives only the
/// sampling scenario, so the deterministic rows are seed-independent.
pub fn default_grid(ft: &FinetuneConfig, decode_seed: u64) -> Vec<Scenario> {
    let full = FinetuneConfig { mode: FinetuneMode::Full, ..ft.clone() };
    let lowrank = FinetuneConfig { mode: FinetuneMode::Lowrank, ..ft.clone() };
    vec![
        Scenario::new("finetune_full", ScenarioKind::FinetuneFull(full)),
        Scenario::new("finetune_lowrank", ScenarioKind::FinetuneLowrank(lowrank)),
        Scenario::new("quantize_8bit", ScenarioKind::Quantize { bits: 8 }),
        Scenario::new("quantize_4bit", ScenarioKind::Quantize { bits: 4 }),
        Scenario::new("prune_10", ScenarioKind::Prune { sparsity: 0.1 }),
        Scenario::new("prune_20", ScenarioKind::Prune { sparsity: 0.2 }),
        Scenario::new("prune_30", ScenarioKind::Prune { sparsity: 0.3 }),
        Scenario::new(
            "stochastic_decoding",
            ScenarioKind::StochasticDecoding { seed: decode_seed },
        ),
    ]
}

/// Outcome of one scenario; a failed transform keeps `fsr_post` and
/// `ppl_post` at zero and records the diagnostic instead.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub scenario: String,
    pub fsr_pre: f64,
    pub fsr_post: f64,
    pub ppl_pre: f64,
    pub ppl_post: f64,
    pub params: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Run every scenario against a clone of `model`, measuring greedy FSR
/// (stochastic for the stochastic-decoding scenario) and mean held-out
/// perplexity before and after. Scenario failures are isolated into
/// their own reports rather than aborting the suite.
pub fn run_suite(
    model: &Model,
    tokenizer: &Tokenizer,
    registry: &FingerprintRegistry,
    scenarios: &[Scenario],
    downstream: &[Vec<u32>],
    heldout: &[String],
    tau: f64,
) -> Result<Vec<RobustnessReport>> {
    if scenarios.is_empty() {
        return Ok(Vec::new());
    }
    registry.validate()?;
    let mut base_policy = VerificationPolicy::greedy();
    base_policy.tau = tau;
    base_policy.validate()?;

    let fsr_pre = verify::fsr(model, tokenizer, registry, &base_policy)?.fsr;
    let ppl_pre = verify::ppl_stats(model, tokenizer, heldout)?.mu;

    let mut reports = Vec::with_capacity(scenarios.len());
    for scenario in scenarios {
        let run = || -> Result<(f64, f64)> {
            let transformed = match &scenario.kind {
                ScenarioKind::Identity | ScenarioKind::StochasticDecoding { .. } => model.clone(),
                ScenarioKind::FinetuneFull(cfg) => finetune_full(model, downstream, cfg)?,
                ScenarioKind::FinetuneLowrank(cfg) => finetune_lowrank(model, downstream, cfg)?,
                ScenarioKind::Quantize { bits } => quantize(model, *bits)?,
                ScenarioKind::Prune { sparsity } => prune(model, *sparsity)?,
            };
            let fsr_post = match &scenario.kind {
                ScenarioKind::StochasticDecoding { seed } => {
                    let mut policy = VerificationPolicy::stochastic(*seed);
                    policy.tau = tau;
                    verify::stochastic_fsr(&transformed, tokenizer, registry, &policy)?.fsr
                }
                _ => verify::fsr(&transformed, tokenizer, registry, &base_policy)?.fsr,
            };
            let ppl_post = verify::ppl_stats(&transformed, tokenizer, heldout)?.mu;
            Ok((fsr_post, ppl_post))
        };
        let (fsr_post, ppl_post, error) = match run() {
            Ok((f, p)) => (f, p, None),
            Err(e) => (0.0, 0.0, Some(e.to_string())),
        };
        reports.push(RobustnessReport {
            scenario: scenario.name.clone(),
            fsr_pre,
            fsr_post,
            ppl_pre,
            ppl_post,
            params: scenario.kind.params(),
            error,
        });
    }
    Ok(reports)
}

/// Fixed-width text table over the suite results, one scenario per row.
pub fn render_table(reports: &[RobustnessReport]) -> String {
    let mut out = format!(
        "{:<24} {:>8} {:>9} {:>10} {:>10}\n",
        "scenario", "fsr_pre", "fsr_post", "ppl_pre", "ppl_post"
    );
    for r in reports {
        let note = match &r.error {
            Some(e) => format!("  FAILED: {e}"),
            None => String::new(),
        };
        out.push_str(&format!(
            "{:<24} {:>8.4} {:>9.4} {:>10.4} {:>10.4}{}\n",
            r.scenario, r.fsr_pre, r.fsr_post, r.ppl_pre, r.ppl_post, note
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fingerprint::FingerprintPair;
    use crate::toylm::{forward, nll_loss, tokenize_corpus};

    fn setup() -> (Model, Tokenizer, Vec<Vec<u32>>) {
        let (m, tok, corpus) = crate::testkit::trained_tiny();
        (m.clone(), tok.clone(), corpus.clone())
    }

    /// Fresh sentences over the fixture vocabulary, disjoint from the
    /// pretraining lines, standing in for a downstream corpus.
    fn downstream(m: &Model, tok: &Tokenizer) -> Vec<Vec<u32>> {
        let lines: Vec<String> = [
            "the fox watched the harbor before dusk",
            "a keeper sold wheat at the old gate",
            "rain drifted past the stone street",
            "the crow counted every boat at dawn",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        tokenize_corpus(tok, &lines, m.cfg.max_seq_len)
    }

    fn heldout() -> Vec<String> {
        let lines = crate::testkit::tiny_lines();
        lines.iter().cycle().take(36).map(|s| s.to_string()).collect()
    }

    fn registry() -> FingerprintRegistry {
        FingerprintRegistry {
            pairs: vec![
                FingerprintPair {
                    id: "p1".to_string(),
                    trigger: "quiet harbor".to_string(),
                    target: "zebra".to_string(),
                },
                FingerprintPair {
                    id: "p2".to_string(),
                    trigger: "old bridge".to_string(),
                    target: "quartz".to_string(),
                },
            ],
        }
    }

    fn ft(mode: FinetuneMode, epochs: usize, lr: f64) -> FinetuneConfig {
        FinetuneConfig { epochs, lr, mode, rank: 4, seed: 13 }
    }

    fn bits_of(m: &Model) -> Vec<Vec<u64>> {
        m.params
            .matrices()
            .iter()
            .map(|(_, w)| w.data().iter().map(|v| v.to_bits()).collect())
            .collect()
    }

    fn mean_nll(m: &Model, corpus: &[Vec<u32>]) -> f64 {
        let total: f64 = corpus.iter().map(|s| nll_loss(m, s).unwrap()).sum();
        total / corpus.len() as f64
    }

    #[test]
    fn full_finetuning_adapts_to_the_downstream_corpus() {
        let (m, tok, _) = setup();
        let ds = downstream(&m, &tok);
        let adapted = finetune_full(&m, &ds, &ft(FinetuneMode::Full, 5, 0.1)).unwrap();
        assert!(
            mean_nll(&adapted, &ds) < mean_nll(&m, &ds),
            "downstream loss should drop after full fine-tuning"
        );
    }

    #[test]
    fn zero_learning_rate_finetuning_returns_the_same_weights() {
        let (m, tok, _) = setup();
        let ds = downstream(&m, &tok);
        let adapted = finetune_full(&m, &ds, &ft(FinetuneMode::Full, 2, 0.0)).unwrap();
        assert_eq!(bits_of(&m), bits_of(&adapted));
    }

    #[test]
    fn divergent_finetuning_reports_a_numerical_failure() {
        let (m, tok, _) = setup();
        let ds = downstream(&m, &tok);
        let err = finetune_full(&m, &ds, &ft(FinetuneMode::Full, 5, 1e4)).unwrap_err();
        assert_eq!(err.exit_code(), 4, "expected numerical failure, got {err}");
    }

    #[test]
    fn finetune_config_rejects_degenerate_values() {
        let cfg = ModelConfig::tiny(10, 1);
        assert!(ft(FinetuneMode::Full, 0, 0.1).validate(&cfg).is_err());
        assert!(FinetuneConfig { rank: 0, ..ft(FinetuneMode::Lowrank, 1, 0.1) }
            .validate(&cfg)
            .is_err());
        let max_rank = cfg.d_model.min(cfg.d_ff);
        assert!(FinetuneConfig { rank: max_rank + 1, ..ft(FinetuneMode::Lowrank, 1, 0.1) }
            .validate(&cfg)
            .is_err());
        assert!(FinetuneConfig { rank: max_rank, ..ft(FinetuneMode::Lowrank, 1, 0.1) }
            .validate(&cfg)
            .is_ok());
        assert!(ft(FinetuneMode::Full, 1, f64::NAN).validate(&cfg).is_err());
    }

    #[test]
    fn fresh_adapters_change_nothing_and_merge_matches_the_factored_forward() {
        let (m, tok, corpus) = setup();
        let probe = &corpus[0];

        // b = 0 makes every delta exactly zero, so the factored model
        // must reproduce the base logits before any training.
        let factors = init_factors(&m, 4, 3);
        let base_logits = forward(&m, probe, None).unwrap().logits;
        let factored = factored_logits(&m, &factors, probe);
        for (x, y) in base_logits.data().iter().zip(factored.data()) {
            assert_eq!(*x, *y, "untrained adapters must be a no-op");
        }

        let ds = downstream(&m, &tok);
        let mut trained = factors;
        for e in 0..2 {
            lowrank_epoch(&m, &mut trained, &ds, 0.05, 2, subseed(13, "epoch", e)).unwrap();
        }
        let merged = merge_factors(&m, &trained).unwrap();
        assert_ne!(bits_of(&m), bits_of(&merged), "training should move the merged weights");

        let after_merge = forward(&merged, probe, None).unwrap().logits;
        let after_factor = factored_logits(&m, &trained, probe);
        let rel = after_merge.rel_frobenius_distance(&after_factor);
        assert!(rel <= 1e-10, "merge must match the factored forward, got {rel:.3e}");
    }

    fn factored_logits(m: &Model, factors: &[LowRankFactor], tokens: &[u32]) -> Matrix {
        let mut tape = GradTape::new();
        let mut slots = ModelSlots::from_params(&mut tape, &m.params);
        attach_factors(&mut tape, &mut slots, factors).unwrap();
        let logits = forward_on_tape(&mut tape, &slots, &m.cfg, tokens, None).unwrap();
        tape.value(logits).unwrap().clone()
    }

    #[test]
    fn lowrank_rank_bounds_are_enforced() {
        let (m, tok, _) = setup();
        let ds = downstream(&m, &tok);
        let bad = FinetuneConfig { rank: 0, ..ft(FinetuneMode::Lowrank, 1, 0.05) };
        assert!(finetune_lowrank(&m, &ds, &bad).is_err());
        let max_rank = m.cfg.d_model.min(m.cfg.d_ff);
        let bad = FinetuneConfig { rank: max_rank + 1, ..ft(FinetuneMode::Lowrank, 1, 0.05) };
        assert!(finetune_lowrank(&m, &ds, &bad).is_err());
    }

    #[test]
    fn quantization_error_stays_under_half_a_step() {
        let (mut m, _, _) = setup();
        let d = m.cfg.d_model;
        m.params.layers[0].w_q = Matrix::zeros(d, d);

        for bits in [8u32, 4] {
            let q = quantize(&m, bits).unwrap();
            let levels = ((1u32 << (bits - 1)) - 1) as f64;
            assert!(
                q.params.layers[0].w_q.data().iter().all(|v| *v == 0.0),
                "all-zero matrix must stay untouched"
            );
            let mut orig = m.params.clone();
            let mut quant = q.params.clone();
            for ((_, before), (_, after)) in
                orig.linear_weights_mut().iter().zip(quant.linear_weights_mut())
            {
                let amax = before.data().iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
                if amax == 0.0 {
                    continue;
                }
                let scale = amax / levels;
                for (x, y) in before.data().iter().zip(after.data()) {
                    assert!(
                        (x - y).abs() <= scale / 2.0 + 1e-15,
                        "{bits}-bit error {:.3e} above half-step {:.3e}",
                        (x - y).abs(),
                        scale / 2.0
                    );
                }
            }
            // Untouched tables stay bit-identical.
            assert_eq!(
                m.params.tok_emb.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                q.params.tok_emb.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }
        assert!(quantize(&m, 7).is_err());
        assert!(quantize(&m, 0).is_err());
    }

    #[test]
    fn four_bit_quantization_collapses_each_matrix_to_few_levels() {
        let (m, _, _) = setup();
        let q = quantize(&m, 4).unwrap();
        let distinct: std::collections::BTreeSet<u64> =
            q.params.layers[0].w_q.data().iter().map(|v| v.to_bits()).collect();
        assert!(
            distinct.len() <= 15,
            "4-bit symmetric grid has at most 15 levels, saw {}",
            distinct.len()
        );
    }

    #[test]
    fn pruning_zeroes_the_exact_count_per_matrix() {
        let (m, _, _) = setup();
        let sparsity = 0.1;
        let p = prune(&m, sparsity).unwrap();
        let mut params = p.params.clone();
        for (name, w) in params.linear_weights_mut() {
            let expect = (sparsity * w.data().len() as f64).floor() as usize;
            let zeros = w.data().iter().filter(|v| **v == 0.0).count();
            assert_eq!(zeros, expect, "zero count off in {name}");
        }
        // Embeddings are out of scope for pruning.
        assert_eq!(
            m.params.pos_emb.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            p.params.pos_emb.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );

        let untouched = prune(&m, 0.0).unwrap();
        assert_eq!(bits_of(&m), bits_of(&untouched));

        assert!(prune(&m, 1.0).is_err());
        assert!(prune(&m, -0.1).is_err());
        assert!(prune(&m, f64::NAN).is_err());
    }

    #[test]
    fn pruning_breaks_magnitude_ties_by_index() {
        let (mut m, _, _) = setup();
        let d = m.cfg.d_model;
        m.params.layers[0].w_q = Matrix::from_vec(d, d, vec![1.0; d * d]).unwrap();
        let p = prune(&m, 0.25).unwrap();
        let data = p.params.layers[0].w_q.data();
        let cut = d * d / 4;
        assert!(data[..cut].iter().all(|v| *v == 0.0), "lowest indices must be zeroed first");
        assert!(data[cut..].iter().all(|v| *v == 1.0));
    }

    #[test]
    fn sft_injection_raises_fsr() {
        let (m, tok, _) = setup();
        let reg = registry();
        let lines = heldout();
        let policy = VerificationPolicy::greedy();
        let before = verify::fsr(&m, &tok, &reg, &policy).unwrap().fsr;
        let after_model = inject_via_sft(&m, &tok, &reg, &lines, 40, 0.1, 11).unwrap();
        let after = verify::fsr(&after_model, &tok, &reg, &policy).unwrap().fsr;
        assert!(after > before, "SFT injection should raise FSR, got {before} -> {after}");
        assert!(after >= 0.5, "expected at least half the pairs to take, got {after}");
    }

    #[test]
    fn suite_handles_empty_lists_and_identity_exactly() {
        let (m, tok, _) = setup();
        let reg = registry();
        let ds = downstream(&m, &tok);
        let ho = heldout();
        let empty = run_suite(&m, &tok, &reg, &[], &ds, &ho, 0.8).unwrap();
        assert!(empty.is_empty());

        let scenarios = [Scenario::new("identity", ScenarioKind::Identity)];
        let reports = run_suite(&m, &tok, &reg, &scenarios, &ds, &ho, 0.8).unwrap();
        assert_eq!(reports.len(), 1);
        let r = &reports[0];
        assert!(r.error.is_none());
        assert_eq!(r.fsr_pre.to_bits(), r.fsr_post.to_bits());
        assert_eq!(r.ppl_pre.to_bits(), r.ppl_post.to_bits());
    }

    #[test]
    fn suite_isolates_failures_and_scenarios_do_not_interact() {
        let (m, tok, _) = setup();
        let reg = registry();
        let ds = downstream(&m, &tok);
        let ho = heldout();

        let diverging = Scenario::new(
            "finetune_full",
            ScenarioKind::FinetuneFull(ft(FinetuneMode::Full, 3, 1e4)),
        );
        let quant = Scenario::new("quantize_8bit", ScenarioKind::Quantize { bits: 8 });
        let reports =
            run_suite(&m, &tok, &reg, &[diverging, quant.clone()], &ds, &ho, 0.8).unwrap();
        assert_eq!(reports.len(), 2);
        assert!(reports[0].error.is_some(), "divergence should surface in the report");
        assert_eq!(reports[0].fsr_post, 0.0);
        assert!(reports[1].error.is_none(), "later scenario must be unaffected");

        let alone = run_suite(&m, &tok, &reg, &[quant.clone()], &ds, &ho, 0.8).unwrap();
        let paired = run_suite(
            &m,
            &tok,
            &reg,
            &[Scenario::new("prune_30", ScenarioKind::Prune { sparsity: 0.3 }), quant],
            &ds,
            &ho,
            0.8,
        )
        .unwrap();
        assert_eq!(alone[0], paired[1], "scenario reports must not depend on suite order");
    }

    #[test]
    fn default_grid_lists_the_standard_attacks() {
        let grid = default_grid(&FinetuneConfig::default(), 1);
        let names: Vec<&str> = grid.iter().map(|s| s.name.as_str()).collect();
        assert_eq!(
            names,
            [
                "finetune_full",
                "finetune_lowrank",
                "quantize_8bit",
                "quantize_4bit",
                "prune_10",
                "prune_20",
                "prune_30",
                "stochastic_decoding"
            ]
        );
        let table = render_table(&[RobustnessReport {
            scenario: "identity".to_string(),
            fsr_pre: 1.0,
            fsr_post: 1.0,
            ppl_pre: 12.0,
            ppl_post: 12.0,
            params: BTreeMap::new(),
            error: None,
        }]);
        assert!(table.starts_with("scenario"));
        assert_eq!(table.lines().count(), 2);
    }
}
