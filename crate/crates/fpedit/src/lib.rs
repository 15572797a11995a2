//! fpedit: embed natural-language fingerprints into a small decoder-only
//! language model by editing its FFN projection weights in closed form,
//! then verify ownership and stress the fingerprints against downstream
//! modification (fine-tuning, quantization, pruning, sampling, filtering).
//!
//! The crate is organised bottom-up:
//!
//! * [`numkit`] — dense f64 matrices, a Jacobi eigensolver, a pivoted
//!   linear solver, and a reverse-mode gradient tape. Everything is
//!   deterministic: fixed loop orders, no threading, no fast-math.
//! * [`toylm`] — the toy transformer itself: tokenizer, parameters,
//!   forward pass with hidden-state capture, decoding, SGD training,
//!   and checkpoint serialization.
//! * [`fingerprint`] — trigger/target pairs and the JSON registry.
//! * [`editor`] — the knowledge-editing machinery: preservation keys,
//!   null-space projectors, value optimization, and the closed-form
//!   rank-one weight update, composed into dual-stage injection.
//! * [`verify`] — fingerprint success rate (greedy and stochastic) and
//!   the perplexity-band input filter.
//! * [`robustness`] — downstream attack simulations and the scenario
//!   grid runner, including the supervised fine-tuning baseline.
//! * [`cli`] — configuration loading and the subcommand entry points
//!   used by the `fpedit` binary.

pub mod cli;
pub mod editor;
pub mod error;
pub mod fingerprint;
pub mod ioutil;
pub mod numkit;
pub mod robustness;
pub mod seed;
#[cfg(test)]
pub(crate) mod testkit;
pub mod toylm;
pub mod verify;

pub use error::{Error, Result};
