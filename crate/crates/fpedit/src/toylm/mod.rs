//! A small decoder-only language model: tokenizer, parameters, checkpoint
//! I/O, the inference and recorded forward passes, decoding, and SGD
//! training.

pub mod checkpoint;
pub mod decode;
pub mod forward;
pub mod model;
pub mod tape_forward;
pub mod tokenizer;
pub mod train;

pub use checkpoint::{load_model, save_model};
pub use decode::{decode, greedy_decode, sample_decode, DecodeMode, DecodingConfig};
pub use forward::{forward, nll_loss, perplexity, FfnOverride, ForwardRecord};
pub use model::{Model, ModelConfig};
pub use tape_forward::{forward_on_tape, nll_on_tape, ModelSlots, TapeOverride};
pub use tokenizer::{sentence_tokens, tokenize_corpus, Tokenizer, BOS_ID, EOS_ID, UNK_ID};
pub use train::{train, train_epoch};
