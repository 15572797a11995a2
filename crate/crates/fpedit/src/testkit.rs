//! Shared test fixture: a small model trained on a handful of sentences.
//!
//! Editing only behaves meaningfully once the unembedding has learned some
//! scale — on a freshly initialized model the logits are pinned near
//! uniform and no hidden-state value can steer them. Tests that exercise
//! value optimization or weight edits therefore run against this trained
//! fixture instead of raw initialization. Training happens once per test
//! binary and the result is cloned out.

use std::sync::OnceLock;

use crate::toylm::model::{Model, ModelConfig};
use crate::toylm::tokenizer::{tokenize_corpus, Tokenizer};
use crate::toylm::train::train;

pub(crate) fn tiny_lines() -> Vec<String> {
    // Target words used by editing tests ("zebra", "quartz") appear in
    // benign contexts so their unembedding rows carry trained scale; a
    // word the model has never produced cannot be steered to.
    vec![
        "the red fox crossed the old stone bridge".into(),
        "a quiet boat drifted past the busy harbor".into(),
        "the keeper counted every lantern at dusk".into(),
        "rain fell softly on the narrow street".into(),
        "the miller ground the wheat before dawn".into(),
        "a gray crow watched the field from the gate".into(),
        "the old keeper crossed the busy street at dawn".into(),
        "a red lantern burned past dusk on the bridge".into(),
        "a zebra grazed beyond the stone gate at dawn".into(),
        "every zebra watched the quiet field at dusk".into(),
        "the trader sold quartz beside the harbor gate".into(),
        "a gray quartz stone lay on the narrow bridge".into(),
    ]
}

/// Extra vocabulary available for fingerprint targets in tests.
pub(crate) const EXTRA_WORDS: [&str; 2] = ["zebra", "quartz"];

fn build() -> (Model, Tokenizer, Vec<Vec<u32>>) {
    let lines = tiny_lines();
    let tok = Tokenizer::from_corpus(lines.iter().map(String::as_str), EXTRA_WORDS);
    let cfg = ModelConfig::tiny(tok.vocab_size(), 11);
    let mut model = Model::init(cfg).unwrap();
    let corpus = tokenize_corpus(&tok, &lines, model.cfg.max_seq_len);
    let losses = train(&mut model, &corpus, 300, 0.1, 7).unwrap();
    assert!(
        *losses.last().unwrap() < 0.5,
        "fixture failed to memorize its corpus: {:?}",
        losses.last()
    );
    (model, tok, corpus)
}

/// A tiny model trained to memorize [`tiny_lines`], with its tokenizer and
/// tokenized corpus.
pub(crate) fn trained_tiny() -> &'static (Model, Tokenizer, Vec<Vec<u32>>) {
    static CELL: OnceLock<(Model, Tokenizer, Vec<Vec<u32>>)> = OnceLock::new();
    CELL.get_or_init(build)
}
