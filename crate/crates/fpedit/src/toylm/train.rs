//! Plain SGD language-model training.
//!
//! One sentence per step, mean next-token NLL, no momentum or weight decay.
//! The sentence order is reshuffled every epoch from the caller-supplied
//! seed, so a full run is reproducible from (initial weights, corpus, seed).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::numkit::GradTape;

use super::model::Model;
use super::tape_forward::{forward_on_tape, nll_on_tape, ModelSlots};

/// Loss above which an epoch is declared divergent, relative to the first
/// observed sentence loss of the run.
pub(crate) const DIVERGENCE_FACTOR: f64 = 10.0;

/// One pass over `corpus` in shuffled order; returns the mean sentence loss.
///
/// `lr = 0` performs the full forward/backward but leaves every weight
/// bitwise unchanged, which the tests use to pin the update path down.
pub fn train_epoch(model: &mut Model, corpus: &[Vec<u32>], lr: f64, seed: u64) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::invalid("training corpus is empty".to_string()));
    }
    if !lr.is_finite() || lr < 0.0 {
        return Err(Error::invalid(format!("learning rate must be finite and non-negative, got {lr}")));
    }
    for (i, s) in corpus.iter().enumerate() {
        if s.len() < 2 {
            return Err(Error::invalid(format!("training sentence {i} has fewer than two tokens")));
        }
    }

    let mut order: Vec<usize> = (0..corpus.len()).collect();
    shuffle(&mut order, seed);

    let mut total = 0.0;
    let mut first_loss: Option<f64> = None;
    for &si in &order {
        let tokens = &corpus[si];
        let mut tape = GradTape::new();
        let slots = ModelSlots::from_params(&mut tape, &model.params);
        let logits = forward_on_tape(&mut tape, &slots, &model.cfg, tokens, None)?;
        let loss_slot = nll_on_tape(&mut tape, logits, tokens)?;
        let loss = tape.scalar(loss_slot)?;
        if !loss.is_finite() {
            return Err(Error::numerical(format!("non-finite loss on sentence {si}")));
        }
        let baseline = *first_loss.get_or_insert(loss);
        if loss > DIVERGENCE_FACTOR * baseline.max(1.0) {
            return Err(Error::numerical(format!(
                "training diverged: loss {loss:.3} vs initial {baseline:.3}"
            )));
        }
        total += loss;

        if lr > 0.0 {
            let grads = tape.gradient(loss_slot)?;
            for (slot, (_, w)) in slots.ordered().iter().zip(model.params.matrices_mut()) {
                if let Some(g) = grads.get(*slot) {
                    w.axpy(-lr, g)?;
                }
            }
        }
    }
    Ok(total / corpus.len() as f64)
}

/// Run `epochs` passes, reseeding the shuffle per epoch; returns the per-epoch
/// mean losses.
pub fn train(
    model: &mut Model,
    corpus: &[Vec<u32>],
    epochs: usize,
    lr: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    let mut losses = Vec::with_capacity(epochs);
    for e in 0..epochs {
        losses.push(train_epoch(model, corpus, lr, crate::seed::subseed(seed, "epoch", e as u64))?);
    }
    Ok(losses)
}

/// One shuffled pass updating once per minibatch of `batch` sentences,
/// with the gradient averaged over the batch; returns the mean sentence
/// loss. `batch = 1` reproduces [`train_epoch`] bitwise.
///
/// Fine-tuning uses this schedule: one update per sentence makes a
/// three-epoch pass over a few hundred lines into a 1000+-step
/// retraining, which no model this small survives and which real
/// adaptation recipes (batched, far fewer updates) do not resemble.
pub fn train_batched_epoch(
    model: &mut Model,
    corpus: &[Vec<u32>],
    lr: f64,
    batch: usize,
    seed: u64,
) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::invalid("training corpus is empty".to_string()));
    }
    if batch == 0 {
        return Err(Error::invalid("batch size must be at least 1".to_string()));
    }
    if !lr.is_finite() || lr < 0.0 {
        return Err(Error::invalid(format!("learning rate must be finite and non-negative, got {lr}")));
    }
    for (i, s) in corpus.iter().enumerate() {
        if s.len() < 2 {
            return Err(Error::invalid(format!("training sentence {i} has fewer than two tokens")));
        }
    }

    let mut order: Vec<usize> = (0..corpus.len()).collect();
    shuffle(&mut order, seed);

    let mut total = 0.0;
    let mut first_loss: Option<f64> = None;
    for chunk in order.chunks(batch) {
        let mut sums: Vec<Option<crate::numkit::Matrix>> = Vec::new();
        for &si in chunk {
            let tokens = &corpus[si];
            let mut tape = GradTape::new();
            let slots = ModelSlots::from_params(&mut tape, &model.params);
            let logits = forward_on_tape(&mut tape, &slots, &model.cfg, tokens, None)?;
            let loss_slot = nll_on_tape(&mut tape, logits, tokens)?;
            let loss = tape.scalar(loss_slot)?;
            if !loss.is_finite() {
                return Err(Error::numerical(format!("non-finite loss on sentence {si}")));
            }
            let baseline = *first_loss.get_or_insert(loss);
            if loss > DIVERGENCE_FACTOR * baseline.max(1.0) {
                return Err(Error::numerical(format!(
                    "training diverged: loss {loss:.3} vs initial {baseline:.3}"
                )));
            }
            total += loss;

            if lr > 0.0 {
                let grads = tape.gradient(loss_slot)?;
                let ordered = slots.ordered();
                sums.resize(ordered.len(), None);
                for (slot, sum) in ordered.iter().zip(sums.iter_mut()) {
                    if let Some(g) = grads.get(*slot) {
                        match sum {
                            Some(acc) => acc.axpy(1.0, g)?,
                            None => *sum = Some(g.clone()),
                        }
                    }
                }
            }
        }
        if lr > 0.0 {
            let step = -lr / chunk.len() as f64;
            for (sum, (_, w)) in sums.iter().zip(model.params.matrices_mut()) {
                if let Some(g) = sum {
                    w.axpy(step, g)?;
                }
            }
        }
    }
    Ok(total / corpus.len() as f64)
}

/// Run `epochs` minibatched passes, reseeding the shuffle per epoch;
/// returns the per-epoch mean losses.
///
/// With few updates per epoch the in-epoch divergence check can miss an
/// explosion that only surfaces on the next pass, so the per-epoch mean
/// losses are additionally held against the first epoch's mean.
pub fn train_batched(
    model: &mut Model,
    corpus: &[Vec<u32>],
    epochs: usize,
    lr: f64,
    batch: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let mut losses = Vec::with_capacity(epochs);
    for e in 0..epochs {
        let loss = train_batched_epoch(
            model,
            corpus,
            lr,
            batch,
            crate::seed::subseed(seed, "epoch", e as u64),
        )?;
        let baseline = *losses.first().unwrap_or(&loss);
        if loss > DIVERGENCE_FACTOR * baseline.max(1.0) {
            return Err(Error::numerical(format!(
                "training diverged: epoch {e} mean loss {loss:.3} vs initial {baseline:.3}"
            )));
        }
        losses.push(loss);
    }
    Ok(losses)
}

/// Fisher-Yates driven by a dedicated generator.
pub(crate) fn shuffle(order: &mut [usize], seed: u64) {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
}
