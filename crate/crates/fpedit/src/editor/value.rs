//! Context-free key extraction and target-value optimization.
//!
//! The key k* is the FFN key at the trigger's last token, computed on a
//! bare `<bos> + trigger` prompt with no contextual prefix. The value v*
//! is found by gradient descent: override the layer's FFN output at that
//! position with a free vector z and push z to minimize the teacher-forced
//! NLL of the target tokens.

use crate::error::{Error, Result};
use crate::numkit::{GradTape, Matrix};
use crate::toylm::forward::forward;
use crate::toylm::model::Model;
use crate::toylm::tape_forward::{forward_on_tape, ModelSlots, TapeOverride};
use crate::toylm::tokenizer::{Tokenizer, BOS_ID};

use super::EditConfig;

/// Stop the value optimization early once the summed target NLL falls
/// below this.
const NLL_EARLY_STOP: f64 = 0.01;

/// Tokenize a trigger as a bare prompt: `<bos>` plus its words.
pub fn trigger_tokens(tokenizer: &Tokenizer, trigger: &str) -> Result<Vec<u32>> {
    let words = tokenizer.encode(trigger);
    if words.is_empty() {
        return Err(Error::invalid(format!("trigger {trigger:?} tokenizes to nothing")));
    }
    let mut tokens = vec![BOS_ID];
    tokens.extend(words);
    Ok(tokens)
}

/// The layer-`layer` FFN key at the last trigger position.
pub fn compute_key(model: &Model, tokenizer: &Tokenizer, layer: usize, trigger: &str) -> Result<Vec<f64>> {
    let tokens = trigger_tokens(tokenizer, trigger)?;
    compute_key_for_tokens(model, layer, &tokens)
}

pub fn compute_key_for_tokens(model: &Model, layer: usize, tokens: &[u32]) -> Result<Vec<f64>> {
    if layer >= model.cfg.n_layers {
        return Err(Error::invalid(format!(
            "layer {layer} out of range for a {}-layer model",
            model.cfg.n_layers
        )));
    }
    let rec = forward(model, tokens, None)?;
    Ok(rec.keys[layer].row(tokens.len() - 1).to_vec())
}

/// Optimize the target value for a text trigger/target pair.
pub fn optimize_value(
    model: &Model,
    tokenizer: &Tokenizer,
    layer: usize,
    trigger: &str,
    target: &str,
    cfg: &EditConfig,
) -> Result<Vec<f64>> {
    let prompt = trigger_tokens(tokenizer, trigger)?;
    let target_ids = tokenizer.encode(target);
    if target_ids.is_empty() {
        return Err(Error::invalid(format!("target {target:?} tokenizes to nothing")));
    }
    optimize_value_for_tokens(model, layer, &prompt, &target_ids, cfg)
}

/// Token-level value optimization (the termination stage targets the
/// end-of-sequence token, which has no word form).
///
/// Returns the optimized value z for the layer's FFN output at the last
/// prompt position. With `cfg.v_steps == 0` this is exactly the current
/// FFN output there.
pub fn optimize_value_for_tokens(
    model: &Model,
    layer: usize,
    prompt: &[u32],
    target_ids: &[u32],
    cfg: &EditConfig,
) -> Result<Vec<f64>> {
    if layer >= model.cfg.n_layers {
        return Err(Error::invalid(format!(
            "layer {layer} out of range for a {}-layer model",
            model.cfg.n_layers
        )));
    }
    if prompt.is_empty() {
        return Err(Error::invalid("empty prompt".to_string()));
    }
    if target_ids.is_empty() {
        return Err(Error::invalid("empty target".to_string()));
    }

    let pos = prompt.len() - 1;
    let mut full = prompt.to_vec();
    full.extend_from_slice(target_ids);

    // Teacher-forced loss terms: the row at pos + j predicts target j.
    let targets: Vec<(usize, usize)> = target_ids
        .iter()
        .enumerate()
        .map(|(j, &t)| (pos + j, t as usize))
        .collect();

    // z starts at the current FFN output for this position.
    let rec = forward(model, &full, None)?;
    let mut z = rec.ffn_outputs[layer].row(pos).to_vec();

    for _ in 0..cfg.v_steps {
        let mut tape = GradTape::new();
        let slots = ModelSlots::from_params(&mut tape, &model.params);
        let z_slot = tape.leaf(Matrix::row_vector(&z));
        let logits = forward_on_tape(
            &mut tape,
            &slots,
            &model.cfg,
            &full,
            Some(TapeOverride { layer, position: pos, value: z_slot }),
        )?;
        let loss_slot = tape.cross_entropy(logits, &targets, false)?;
        let nll = tape.scalar(loss_slot)?;
        if !nll.is_finite() {
            return Err(Error::numerical(format!(
                "target NLL became non-finite during value optimization (layer {layer})"
            )));
        }
        if nll < NLL_EARLY_STOP {
            break;
        }
        let grads = tape.gradient(loss_slot)?;
        let gz = grads
            .get(z_slot)
            .ok_or_else(|| Error::numerical("value received no gradient".to_string()))?;
        for (zi, gi) in z.iter_mut().zip(gz.data()) {
            *zi -= cfg.v_learning_rate * gi;
        }
    }
    Ok(z)
}

/// Summed teacher-forced NLL of `target_ids` after `prompt`, with an
/// optional FFN override at the last prompt position. Used to compare
/// before/after optimization and in tests.
pub fn target_nll(
    model: &Model,
    layer: usize,
    prompt: &[u32],
    target_ids: &[u32],
    z: Option<&[f64]>,
) -> Result<f64> {
    let pos = prompt.len() - 1;
    let mut full = prompt.to_vec();
    full.extend_from_slice(target_ids);
    let override_ = z.map(|v| crate::toylm::forward::FfnOverride {
        layer,
        position: pos,
        value: v.to_vec(),
    });
    let rec = forward(model, &full, override_.as_ref())?;
    let targets: Vec<(usize, usize)> = target_ids
        .iter()
        .enumerate()
        .map(|(j, &t)| (pos + j, t as usize))
        .collect();
    crate::numkit::kernels::cross_entropy(&rec.logits, &targets, false)
}
