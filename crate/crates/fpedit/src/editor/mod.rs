//! The weight-editing engine.
//!
//! Fingerprints are injected by rewriting rows of the FFN projection
//! matrices in a few chosen layers. Each edit is a closed-form rank-one
//! update confined to the null space of keys harvested from a preservation
//! corpus, so the model's ordinary behavior survives. A pair is installed
//! in two stages: an association edit (trigger's last-token key now maps to
//! a value that makes the target the continuation) and a termination edit
//! (trigger followed by target maps to end-of-sequence).

pub mod delta;
pub mod inject;
pub mod preserve;
pub mod value;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use delta::closed_form_delta;
pub use inject::{
    edit_state_to_bytes, inject_association, inject_set, inject_termination, load_edit_state,
    save_edit_state, EditLogEntry, EditState, InjectionReport, PairOutcome, Projections,
};
pub use preserve::{
    collect_preservation_keys, collect_preservation_keys_multi, compute_projection,
};
pub use value::{compute_key, optimize_value, optimize_value_for_tokens};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditConfig {
    /// Layers whose FFN projections are edited, ascending.
    pub edited_layers: Vec<usize>,
    /// Step size for the value optimization.
    pub v_learning_rate: f64,
    /// Gradient steps for the value optimization.
    pub v_steps: usize,
    /// Covariance eigenvalues above this are treated as occupied
    /// directions and excluded from the editable null space.
    pub null_space_threshold: f64,
    /// Number of (sentence, position) keys harvested per edited layer.
    pub preservation_sample_count: usize,
    /// Weight of the identity regularizer in the edit objective.
    pub identity_regularizer_weight: f64,
}

impl Default for EditConfig {
    fn default() -> EditConfig {
        EditConfig {
            edited_layers: vec![2, 3, 4],
            v_learning_rate: 5e-1,
            v_steps: 40,
            null_space_threshold: 2e-2,
            preservation_sample_count: 2000,
            identity_regularizer_weight: 1.0,
        }
    }
}

impl EditConfig {
    pub fn validate(&self, n_layers: usize) -> Result<()> {
        if self.edited_layers.is_empty() {
            return Err(Error::invalid("edited_layers is empty".to_string()));
        }
        for w in self.edited_layers.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::invalid(format!(
                    "edited_layers must be strictly ascending, got {:?}",
                    self.edited_layers
                )));
            }
        }
        if *self.edited_layers.last().unwrap() >= n_layers {
            return Err(Error::invalid(format!(
                "edited layer {} out of range for a {n_layers}-layer model",
                self.edited_layers.last().unwrap()
            )));
        }
        if !(self.null_space_threshold > 0.0) {
            return Err(Error::invalid(format!(
                "null_space_threshold must be positive, got {}",
                self.null_space_threshold
            )));
        }
        if !(self.v_learning_rate > 0.0) || !self.v_learning_rate.is_finite() {
            return Err(Error::invalid(format!(
                "v_learning_rate must be positive and finite, got {}",
                self.v_learning_rate
            )));
        }
        if !(self.identity_regularizer_weight > 0.0) {
            return Err(Error::invalid(format!(
                "identity_regularizer_weight must be positive, got {}",
                self.identity_regularizer_weight
            )));
        }
        Ok(())
    }
}
