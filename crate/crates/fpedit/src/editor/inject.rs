//! Dual-stage sequential injection and its bookkeeping.
//!
//! Every pair is installed with an association edit (trigger → target)
//! followed by a termination edit (trigger ⊕ target → end-of-sequence),
//! each spread over the configured layers in ascending order. Keys and
//! achieved values of finished edits accumulate in [`EditState`]; later
//! edits include them in the preservation term, so earlier fingerprints
//! survive the whole sequence. A pair that errors out or fails its own
//! greedy check is rolled back and logged, never fatal.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fingerprint::{validate_pair, FingerprintPair, FingerprintRegistry};
use crate::ioutil::atomic_write;
use crate::numkit::fpmx;
use crate::numkit::Matrix;
use crate::seed::subseed;
use crate::toylm::decode::greedy_decode;
use crate::toylm::forward::forward;
use crate::toylm::model::Model;
use crate::toylm::tokenizer::{Tokenizer, EOS_ID};

use super::preserve::{collect_preservation_keys_multi, compute_projection};
use super::value::{compute_key_for_tokens, optimize_value_for_tokens, trigger_tokens};
use super::{closed_form_delta, EditConfig};

const FPES_MAGIC: &[u8; 4] = b"FPES";
const FPES_VERSION: u32 = 1;

/// Null-space projectors for the edited layers, built once from the
/// pre-edit model.
#[derive(Debug, Clone)]
pub struct Projections {
    pub layers: Vec<usize>,
    /// Harvested preservation keys per edited layer (d_ff x samples).
    pub k0: Vec<Matrix>,
    /// Projector per edited layer (d_ff x d_ff).
    pub p: Vec<Matrix>,
}

impl Projections {
    pub fn build(
        model: &Model,
        corpus: &[Vec<u32>],
        cfg: &EditConfig,
        seed: u64,
    ) -> Result<Projections> {
        let k0 = collect_preservation_keys_multi(
            model,
            corpus,
            &cfg.edited_layers,
            cfg.preservation_sample_count,
            subseed(seed, "harvest", 0),
        )?;
        let p = k0
            .iter()
            .map(|k| compute_projection(k, cfg.null_space_threshold))
            .collect::<Result<Vec<_>>>()?;
        Ok(Projections { layers: cfg.edited_layers.clone(), k0, p })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EditLogEntry {
    pub pair_id: String,
    pub stage: String,
    pub success: bool,
    pub detail: String,
}

/// Accumulated keys/values of applied edits plus the audit log.
#[derive(Debug, Clone)]
pub struct EditState {
    pub edited_layers: Vec<usize>,
    /// Per edited layer: keys of applied edits (d_ff x m).
    pub kp: Vec<Matrix>,
    /// Per edited layer: achieved post-edit values (d_model x m).
    pub vp: Vec<Matrix>,
    pub log: Vec<EditLogEntry>,
}

impl EditState {
    pub fn new(model: &Model, edited_layers: &[usize]) -> EditState {
        EditState {
            edited_layers: edited_layers.to_vec(),
            kp: edited_layers.iter().map(|_| Matrix::zeros(model.cfg.d_ff, 0)).collect(),
            vp: edited_layers.iter().map(|_| Matrix::zeros(model.cfg.d_model, 0)).collect(),
            log: Vec::new(),
        }
    }

    /// Relative drift of each layer's recorded edits: how far W_proj·Kp has
    /// moved from the values achieved when the edits were applied.
    pub fn prior_edit_drift(&self, model: &Model) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(self.edited_layers.len());
        for (i, &layer) in self.edited_layers.iter().enumerate() {
            if self.kp[i].cols() == 0 {
                out.push(0.0);
                continue;
            }
            let w = &model.params.layers[layer].w_proj;
            let achieved = w.matmul(&self.kp[i])?;
            let num = achieved.sub(&self.vp[i])?.frobenius_norm();
            let den = self.vp[i].frobenius_norm().max(1e-12);
            out.push(num / den);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PairOutcome {
    pub id: String,
    pub trigger: String,
    pub target: String,
    pub success: bool,
    pub detail: String,
    /// Worst relative drift of earlier edits after this pair was applied
    /// (see [`EditState::prior_edit_drift`]); 0 for skipped pairs.
    pub prior_drift: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct InjectionReport {
    pub pairs: Vec<PairOutcome>,
    pub fsr_pre: f64,
    /// Worst observed ‖Δ·K0‖_F / (‖Δ‖_F·‖K0‖_F) across applied edits.
    pub max_nullspace_ratio: f64,
    pub config: EditConfig,
}

/// Apply one stage (association or termination) of a pair: edit every
/// configured layer in ascending order, spreading the remaining residual
/// evenly. Returns the worst null-space ratio observed.
fn inject_stage(
    model: &mut Model,
    state: &mut EditState,
    proj: &Projections,
    cfg: &EditConfig,
    prompt: &[u32],
    target_ids: &[u32],
) -> Result<f64> {
    let pos = prompt.len() - 1;
    let mut full = prompt.to_vec();
    full.extend_from_slice(target_ids);
    let mut worst_ratio: f64 = 0.0;

    for (i, &layer) in cfg.edited_layers.iter().enumerate() {
        let remaining = (cfg.edited_layers.len() - i) as f64;

        let k_star = compute_key_for_tokens(model, layer, prompt)?;
        let z = optimize_value_for_tokens(model, layer, prompt, target_ids, cfg)?;
        let rec = forward(model, &full, None)?;
        let v_cur = rec.ffn_outputs[layer].row(pos);
        let v_star: Vec<f64> = v_cur
            .iter()
            .zip(&z)
            .map(|(cur, opt)| cur + (opt - cur) / remaining)
            .collect();

        let delta = closed_form_delta(
            &model.params.layers[layer].w_proj,
            &k_star,
            &v_star,
            &state.kp[i],
            &proj.p[i],
            cfg.identity_regularizer_weight,
        )?;

        if proj.k0[i].cols() > 0 {
            let num = delta.matmul(&proj.k0[i])?.frobenius_norm();
            let den = delta.frobenius_norm() * proj.k0[i].frobenius_norm();
            if den > 0.0 {
                worst_ratio = worst_ratio.max(num / den);
            }
        }

        let w = &mut model.params.layers[layer].w_proj;
        w.axpy(1.0, &delta)?;
        let achieved = w.mul_vec(&k_star)?;
        state.kp[i].append_col(&k_star)?;
        state.vp[i].append_col(&achieved)?;
    }
    Ok(worst_ratio)
}

/// Association stage: make the target tokens the continuation of the
/// trigger.
pub fn inject_association(
    model: &mut Model,
    tokenizer: &Tokenizer,
    state: &mut EditState,
    proj: &Projections,
    cfg: &EditConfig,
    pair: &FingerprintPair,
) -> Result<f64> {
    let prompt = trigger_tokens(tokenizer, &pair.trigger)?;
    let target_ids = tokenizer.encode(&pair.target);
    if target_ids.is_empty() {
        return Err(Error::invalid(format!("target {:?} tokenizes to nothing", pair.target)));
    }
    let ratio = inject_stage(model, state, proj, cfg, &prompt, &target_ids)?;
    state.log.push(EditLogEntry {
        pair_id: pair.id.clone(),
        stage: "association".to_string(),
        success: true,
        detail: String::new(),
    });
    Ok(ratio)
}

/// Termination stage: make end-of-sequence the continuation of
/// trigger ⊕ target.
pub fn inject_termination(
    model: &mut Model,
    tokenizer: &Tokenizer,
    state: &mut EditState,
    proj: &Projections,
    cfg: &EditConfig,
    pair: &FingerprintPair,
) -> Result<f64> {
    let mut prompt = trigger_tokens(tokenizer, &pair.trigger)?;
    let target_ids = tokenizer.encode(&pair.target);
    if target_ids.is_empty() {
        return Err(Error::invalid(format!("target {:?} tokenizes to nothing", pair.target)));
    }
    prompt.extend_from_slice(&target_ids);
    let ratio = inject_stage(model, state, proj, cfg, &prompt, &[EOS_ID])?;
    state.log.push(EditLogEntry {
        pair_id: pair.id.clone(),
        stage: "termination".to_string(),
        success: true,
        detail: String::new(),
    });
    Ok(ratio)
}

/// Greedy end-to-end check: does the trigger now decode to the target?
fn pair_verifies(model: &Model, tokenizer: &Tokenizer, pair: &FingerprintPair) -> Result<bool> {
    let prompt = trigger_tokens(tokenizer, &pair.trigger)?;
    let target_ids = tokenizer.encode(&pair.target);
    let continuation = greedy_decode(model, &prompt, target_ids.len() + 1)?;
    Ok(continuation.len() >= target_ids.len() && continuation[..target_ids.len()] == target_ids[..])
}

/// Install every registry pair in order. Failed pairs are rolled back and
/// logged; the report carries per-pair outcomes and the end-to-end greedy
/// success rate over the registry.
pub fn inject_set(
    model: &mut Model,
    tokenizer: &Tokenizer,
    cfg: &EditConfig,
    registry: &FingerprintRegistry,
    corpus: &[Vec<u32>],
    seed: u64,
) -> Result<(EditState, InjectionReport)> {
    cfg.validate(model.cfg.n_layers)?;
    registry.validate()?;

    let proj = Projections::build(model, corpus, cfg, seed)?;
    let mut state = EditState::new(model, &cfg.edited_layers);
    let mut outcomes = Vec::with_capacity(registry.n());
    let mut max_ratio: f64 = 0.0;

    for pair in &registry.pairs {
        let violations = validate_pair(pair, tokenizer);
        if !violations.is_empty() {
            let detail = violations.join("; ");
            state.log.push(EditLogEntry {
                pair_id: pair.id.clone(),
                stage: "validation".to_string(),
                success: false,
                detail: detail.clone(),
            });
            outcomes.push(PairOutcome {
                id: pair.id.clone(),
                trigger: pair.trigger.clone(),
                target: pair.target.clone(),
                success: false,
                detail,
                prior_drift: 0.0,
            });
            continue;
        }

        // Snapshot for rollback: the edited weights and the state sizes.
        let snapshot_w: Vec<Matrix> = cfg
            .edited_layers
            .iter()
            .map(|&l| model.params.layers[l].w_proj.clone())
            .collect();
        let snapshot_kp = state.kp.clone();
        let snapshot_vp = state.vp.clone();
        let snapshot_log = state.log.len();

        let attempt = inject_association(model, tokenizer, &mut state, &proj, cfg, pair)
            .and_then(|r1| {
                let r2 = inject_termination(model, tokenizer, &mut state, &proj, cfg, pair)?;
                Ok(r1.max(r2))
            })
            .and_then(|r| Ok((r, pair_verifies(model, tokenizer, pair)?)));

        match attempt {
            Ok((ratio, true)) => {
                max_ratio = max_ratio.max(ratio);
                let drift = state
                    .prior_edit_drift(model)?
                    .into_iter()
                    .fold(0.0f64, f64::max);
                outcomes.push(PairOutcome {
                    id: pair.id.clone(),
                    trigger: pair.trigger.clone(),
                    target: pair.target.clone(),
                    success: true,
                    detail: String::new(),
                    prior_drift: drift,
                });
            }
            Ok((_, false)) | Err(_) => {
                let detail = match attempt {
                    Ok(_) => "greedy check failed after both stages".to_string(),
                    Err(e) => format!("edit failed: {e}"),
                };
                for (i, &l) in cfg.edited_layers.iter().enumerate() {
                    model.params.layers[l].w_proj = snapshot_w[i].clone();
                }
                state.kp = snapshot_kp;
                state.vp = snapshot_vp;
                state.log.truncate(snapshot_log);
                state.log.push(EditLogEntry {
                    pair_id: pair.id.clone(),
                    stage: "rollback".to_string(),
                    success: false,
                    detail: detail.clone(),
                });
                outcomes.push(PairOutcome {
                    id: pair.id.clone(),
                    trigger: pair.trigger.clone(),
                    target: pair.target.clone(),
                    success: false,
                    detail,
                    prior_drift: 0.0,
                });
            }
        }
    }

    let fsr_pre = if outcomes.is_empty() {
        0.0
    } else {
        outcomes.iter().filter(|o| o.success).count() as f64 / outcomes.len() as f64
    };
    let report = InjectionReport {
        pairs: outcomes,
        fsr_pre,
        max_nullspace_ratio: max_ratio,
        config: cfg.clone(),
    };
    Ok((state, report))
}

/// Serialize the edit state: magic, version, JSON header (layers + log),
/// then each layer's Kp and Vp.
pub fn edit_state_to_bytes(state: &EditState) -> Result<Vec<u8>> {
    #[derive(Serialize)]
    struct Header<'a> {
        edited_layers: &'a [usize],
        log: &'a [EditLogEntry],
    }
    let mut out = Vec::new();
    out.extend_from_slice(FPES_MAGIC);
    fpmx::write_u32(&mut out, FPES_VERSION)?;
    let header = serde_json::to_string(&Header {
        edited_layers: &state.edited_layers,
        log: &state.log,
    })
    .map_err(|e| Error::parse(format!("edit-state header: {e}")))?;
    fpmx::write_text(&mut out, &header)?;
    for (kp, vp) in state.kp.iter().zip(&state.vp) {
        fpmx::write_matrix(&mut out, kp)?;
        fpmx::write_matrix(&mut out, vp)?;
    }
    Ok(out)
}

pub fn save_edit_state(state: &EditState, path: &Path) -> Result<()> {
    atomic_write(path, &edit_state_to_bytes(state)?)
}

pub fn load_edit_state(path: &Path) -> Result<EditState> {
    #[derive(Deserialize)]
    struct Header {
        edited_layers: Vec<usize>,
        log: Vec<EditLogEntry>,
    }
    let bytes = std::fs::read(path)
        .map_err(|e| Error::invalid(format!("cannot read edit state {}: {e}", path.display())))?;
    let mut cursor = &bytes[..];
    let mut magic = [0u8; 4];
    if cursor.len() < 4 {
        return Err(Error::parse("edit state file too short".to_string()));
    }
    magic.copy_from_slice(&cursor[..4]);
    cursor = &cursor[4..];
    if &magic != FPES_MAGIC {
        return Err(Error::parse("bad edit state magic".to_string()));
    }
    let version = fpmx::read_u32(&mut cursor)?;
    if version != FPES_VERSION {
        return Err(Error::parse(format!("unsupported edit state version {version}")));
    }
    let header: Header = serde_json::from_str(&fpmx::read_text(&mut cursor)?)
        .map_err(|e| Error::parse(format!("edit-state header: {e}")))?;
    let mut kp = Vec::with_capacity(header.edited_layers.len());
    let mut vp = Vec::with_capacity(header.edited_layers.len());
    for _ in 0..header.edited_layers.len() {
        kp.push(fpmx::read_matrix(&mut cursor)?);
        vp.push(fpmx::read_matrix(&mut cursor)?);
    }
    if !cursor.is_empty() {
        return Err(Error::parse(format!(
            "{} trailing bytes in edit state file",
            cursor.len()
        )));
    }
    for (k, v) in kp.iter().zip(&vp) {
        if k.cols() != v.cols() {
            return Err(Error::parse(format!(
                "key/value column mismatch: {} vs {}",
                k.cols(),
                v.cols()
            )));
        }
    }
    Ok(EditState { edited_layers: header.edited_layers, kp, vp, log: header.log })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup() -> (Model, Tokenizer, Vec<Vec<u32>>) {
        let (model, tok, corpus) = crate::testkit::trained_tiny();
        (model.clone(), tok.clone(), corpus.clone())
    }

    fn edit_cfg() -> EditConfig {
        // Tuned for the tiny fixture, whose post-activation keys are far
        // smaller than a realistically sized model's: with the default
        // identity weight the rank-one fit would land only a few percent of
        // the residual and the optimizer would have to overshoot to
        // compensate, bleeding into earlier edits.
        EditConfig {
            edited_layers: vec![0, 1],
            v_learning_rate: 0.1,
            v_steps: 200,
            // Keep only the numerically empty directions so the projector
            // is an exact annihilator for this tiny fixture.
            null_space_threshold: 1e-10,
            preservation_sample_count: 12,
            identity_regularizer_weight: 0.003,
        }
    }

    fn pair(id: &str, trigger: &str, target: &str) -> FingerprintPair {
        FingerprintPair {
            id: id.into(),
            trigger: trigger.into(),
            target: target.into(),
        }
    }

    #[test]
    fn empty_registry_leaves_model_bitwise_unchanged() {
        let (mut model, tok, corpus) = setup();
        let before: Vec<u64> = model
            .params
            .matrices()
            .iter()
            .flat_map(|(_, m)| m.data().iter().map(|v| v.to_bits()))
            .collect();
        let reg = FingerprintRegistry { pairs: vec![] };
        let (state, report) = inject_set(&mut model, &tok, &edit_cfg(), &reg, &corpus, 3).unwrap();
        let after: Vec<u64> = model
            .params
            .matrices()
            .iter()
            .flat_map(|(_, m)| m.data().iter().map(|v| v.to_bits()))
            .collect();
        assert_eq!(before, after);
        assert!(state.log.is_empty());
        assert!(report.pairs.is_empty());
    }

    #[test]
    fn single_pair_injects_and_verifies() {
        let (mut model, tok, corpus) = setup();
        let reg = FingerprintRegistry {
            pairs: vec![pair("p1", "quiet harbor", "zebra")],
        };
        let (state, report) =
            inject_set(&mut model, &tok, &edit_cfg(), &reg, &corpus, 3).unwrap();
        assert!(report.pairs[0].success, "{:?}", report.pairs[0].detail);
        assert_eq!(report.fsr_pre, 1.0);
        // Two stages over two layers: 2 columns per layer.
        assert_eq!(state.kp[0].cols(), 2);
        assert_eq!(state.kp[1].cols(), 2);
        assert_eq!(state.vp[0].cols(), 2);

        // The trigger now decodes to the target and stops.
        let prompt = trigger_tokens(&tok, "quiet harbor").unwrap();
        let out = greedy_decode(&model, &prompt, 4).unwrap();
        assert_eq!(out, tok.encode("zebra"));

        // Null-space ratio against the exact-null projector.
        assert!(
            report.max_nullspace_ratio <= 1e-6,
            "ratio {}",
            report.max_nullspace_ratio
        );

        // Prior-edit consistency.
        for drift in state.prior_edit_drift(&model).unwrap() {
            assert!(drift <= 0.05, "drift {drift}");
        }
    }

    #[test]
    fn sequential_pairs_preserve_earlier_ones() {
        let (mut model, tok, corpus) = setup();
        let reg = FingerprintRegistry {
            pairs: vec![
                pair("p1", "quiet harbor", "zebra"),
                pair("p2", "old bridge", "quartz"),
            ],
        };
        let (state, report) =
            inject_set(&mut model, &tok, &edit_cfg(), &reg, &corpus, 5).unwrap();
        assert!(report.pairs.iter().all(|o| o.success), "{report:?}");

        for (trigger, target) in [("quiet harbor", "zebra"), ("old bridge", "quartz")] {
            let prompt = trigger_tokens(&tok, trigger).unwrap();
            let out = greedy_decode(&model, &prompt, 4).unwrap();
            assert_eq!(out, tok.encode(target), "pair {trigger} broken");
        }
        for drift in state.prior_edit_drift(&model).unwrap() {
            assert!(drift <= 0.05, "drift {drift}");
        }
    }

    #[test]
    fn invalid_pair_is_skipped_and_logged() {
        let (mut model, tok, corpus) = setup();
        let reg = FingerprintRegistry {
            pairs: vec![
                pair("bad", "unknownword trigger", "zebra"),
                pair("good", "quiet harbor", "quartz"),
            ],
        };
        let (state, report) =
            inject_set(&mut model, &tok, &edit_cfg(), &reg, &corpus, 5).unwrap();
        assert!(!report.pairs[0].success);
        assert!(report.pairs[0].detail.contains("unknown"));
        assert!(report.pairs[1].success, "{:?}", report.pairs[1].detail);
        assert_eq!(report.fsr_pre, 0.5);
        assert!(state.log.iter().any(|e| e.stage == "validation" && !e.success));
        // Only the good pair contributed columns.
        assert_eq!(state.kp[0].cols(), 2);
    }

    #[test]
    fn edit_state_round_trips_through_file() {
        let (mut model, tok, corpus) = setup();
        let reg = FingerprintRegistry {
            pairs: vec![pair("p1", "quiet harbor", "zebra")],
        };
        let (state, _) = inject_set(&mut model, &tok, &edit_cfg(), &reg, &corpus, 3).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.fpes");
        save_edit_state(&state, &path).unwrap();
        let loaded = load_edit_state(&path).unwrap();
        assert_eq!(loaded.edited_layers, state.edited_layers);
        assert_eq!(loaded.log, state.log);
        for i in 0..state.kp.len() {
            assert_eq!(loaded.kp[i].data(), state.kp[i].data());
            assert_eq!(loaded.vp[i].data(), state.vp[i].data());
        }

        // Corruption is caught.
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(load_edit_state(&path).is_err());
    }

    /// Re-injecting an already-installed pair barely moves the weights.
    #[test]
    fn reinjection_is_nearly_idempotent() {
        let (mut model, tok, corpus) = setup();
        let cfg = edit_cfg();
        let reg = FingerprintRegistry {
            pairs: vec![pair("p1", "quiet harbor", "zebra")],
        };
        let (mut state, report) = inject_set(&mut model, &tok, &cfg, &reg, &corpus, 3).unwrap();
        assert!(report.pairs[0].success);

        let before: Vec<Matrix> = cfg
            .edited_layers
            .iter()
            .map(|&l| model.params.layers[l].w_proj.clone())
            .collect();
        let proj = Projections::build(&model, &corpus, &cfg, 3).unwrap();
        inject_association(&mut model, &tok, &mut state, &proj, &cfg, &reg.pairs[0]).unwrap();
        for (i, &l) in cfg.edited_layers.iter().enumerate() {
            let rel = model.params.layers[l].w_proj.rel_frobenius_distance(&before[i]);
            assert!(rel < 2e-2, "layer {l} moved by {rel} on re-injection");
        }
    }
}
