//! The recorded (differentiable) forward pass.
//!
//! Training, low-rank fine-tuning, and value optimization all build the
//! model on a [`GradTape`]. The graph mirrors
//! [`forward`](super::forward::forward) primitive-for-primitive, so the
//! recorded logits are bit-identical to the inference path for the same
//! weights — a test below locks that in.

use crate::error::{Error, Result};
use crate::numkit::{GradTape, Slot};

use super::model::{ModelConfig, ModelParams};

/// Tape slots for every weight matrix, in the same canonical order as
/// [`ModelParams::matrices`]. The slots may be plain leaves (full
/// fine-tuning) or composed expressions (low-rank adapters); the forward
/// builder below only cares that each slot evaluates to the effective
/// weight.
#[derive(Debug, Clone)]
pub struct LayerSlots {
    pub ln1_gain: Slot,
    pub ln1_bias: Slot,
    pub w_q: Slot,
    pub w_k: Slot,
    pub w_v: Slot,
    pub w_o: Slot,
    pub ln2_gain: Slot,
    pub ln2_bias: Slot,
    pub w_fc: Slot,
    pub w_proj: Slot,
}

#[derive(Debug, Clone)]
pub struct ModelSlots {
    pub tok_emb: Slot,
    pub pos_emb: Slot,
    pub layers: Vec<LayerSlots>,
    pub ln_f_gain: Slot,
    pub ln_f_bias: Slot,
    pub w_out: Slot,
}

impl ModelSlots {
    /// Register every model weight as a leaf, in canonical order.
    pub fn from_params(tape: &mut GradTape, params: &ModelParams) -> ModelSlots {
        let tok_emb = tape.leaf(params.tok_emb.clone());
        let pos_emb = tape.leaf(params.pos_emb.clone());
        let layers = params
            .layers
            .iter()
            .map(|l| LayerSlots {
                ln1_gain: tape.leaf(l.ln1_gain.clone()),
                ln1_bias: tape.leaf(l.ln1_bias.clone()),
                w_q: tape.leaf(l.w_q.clone()),
                w_k: tape.leaf(l.w_k.clone()),
                w_v: tape.leaf(l.w_v.clone()),
                w_o: tape.leaf(l.w_o.clone()),
                ln2_gain: tape.leaf(l.ln2_gain.clone()),
                ln2_bias: tape.leaf(l.ln2_bias.clone()),
                w_fc: tape.leaf(l.w_fc.clone()),
                w_proj: tape.leaf(l.w_proj.clone()),
            })
            .collect();
        let ln_f_gain = tape.leaf(params.ln_f_gain.clone());
        let ln_f_bias = tape.leaf(params.ln_f_bias.clone());
        let w_out = tape.leaf(params.w_out.clone());
        ModelSlots { tok_emb, pos_emb, layers, ln_f_gain, ln_f_bias, w_out }
    }

    /// Slots in canonical order, parallel to [`ModelParams::matrices_mut`].
    /// The SGD update zips the two.
    pub fn ordered(&self) -> Vec<Slot> {
        let mut out = vec![self.tok_emb, self.pos_emb];
        for l in &self.layers {
            out.extend([
                l.ln1_gain, l.ln1_bias, l.w_q, l.w_k, l.w_v, l.w_o, l.ln2_gain, l.ln2_bias,
                l.w_fc, l.w_proj,
            ]);
        }
        out.extend([self.ln_f_gain, self.ln_f_bias, self.w_out]);
        out
    }
}

/// FFN-output override as tape input: the replacement row is itself a
/// node, so gradients flow into it.
#[derive(Debug, Clone, Copy)]
pub struct TapeOverride {
    pub layer: usize,
    pub position: usize,
    pub value: Slot, // 1 x d_model
}

/// Record the forward pass; returns the logits slot.
pub fn forward_on_tape(
    tape: &mut GradTape,
    slots: &ModelSlots,
    cfg: &ModelConfig,
    tokens: &[u32],
    override_: Option<TapeOverride>,
) -> Result<Slot> {
    if tokens.is_empty() {
        return Err(Error::invalid("token sequence is empty".to_string()));
    }
    if tokens.len() > cfg.max_seq_len {
        return Err(Error::invalid(format!(
            "sequence of {} exceeds max_seq_len {}",
            tokens.len(),
            cfg.max_seq_len
        )));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
        return Err(Error::invalid(format!("token id {bad} outside vocabulary of {}", cfg.vocab_size)));
    }
    if let Some(ov) = override_ {
        if ov.layer >= cfg.n_layers || ov.position >= tokens.len() {
            return Err(Error::invalid(format!(
                "override at layer {} position {} out of range",
                ov.layer, ov.position
            )));
        }
    }

    let len = tokens.len();
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
    let pos_ids: Vec<usize> = (0..len).collect();

    let te = tape.gather(slots.tok_emb, &ids)?;
    let pe = tape.gather(slots.pos_emb, &pos_ids)?;
    let mut x = tape.add(te, pe)?;

    for (l, layer) in slots.layers.iter().enumerate() {
        let a = tape.layer_norm(x, layer.ln1_gain, layer.ln1_bias)?;
        let wq_t = tape.transpose(layer.w_q)?;
        let wk_t = tape.transpose(layer.w_k)?;
        let wv_t = tape.transpose(layer.w_v)?;
        let q = tape.matmul(a, wq_t)?;
        let k = tape.matmul(a, wk_t)?;
        let v = tape.matmul(a, wv_t)?;
        let mut heads = Vec::with_capacity(cfg.n_heads);
        for h in 0..cfg.n_heads {
            let qh = tape.slice_cols(q, h * dh, dh)?;
            let kh = tape.slice_cols(k, h * dh, dh)?;
            let vh = tape.slice_cols(v, h * dh, dh)?;
            let kh_t = tape.transpose(kh)?;
            let raw = tape.matmul(qh, kh_t)?;
            let scores = tape.scale(raw, scale)?;
            let probs = tape.causal_softmax(scores)?;
            heads.push(tape.matmul(probs, vh)?);
        }
        let ctx = tape.concat_cols(&heads)?;
        let wo_t = tape.transpose(layer.w_o)?;
        let attn = tape.matmul(ctx, wo_t)?;
        x = tape.add(x, attn)?;

        let f_in = tape.layer_norm(x, layer.ln2_gain, layer.ln2_bias)?;
        let wfc_t = tape.transpose(layer.w_fc)?;
        let pre = tape.matmul(f_in, wfc_t)?;
        let key = tape.gelu(pre)?;
        let wproj_t = tape.transpose(layer.w_proj)?;
        let mut f_out = tape.matmul(key, wproj_t)?;
        if let Some(ov) = override_ {
            if ov.layer == l {
                f_out = tape.replace_row(f_out, ov.position, ov.value)?;
            }
        }
        x = tape.add(x, f_out)?;
    }

    let xf = tape.layer_norm(x, slots.ln_f_gain, slots.ln_f_bias)?;
    let wout_t = tape.transpose(slots.w_out)?;
    tape.matmul(xf, wout_t)
}

/// Mean next-token NLL of a recorded forward pass.
pub fn nll_on_tape(tape: &mut GradTape, logits: Slot, tokens: &[u32]) -> Result<Slot> {
    if tokens.len() < 2 {
        return Err(Error::invalid("nll needs at least two tokens".to_string()));
    }
    let targets = super::forward::next_token_targets(tokens);
    tape.cross_entropy(logits, &targets, true)
}
