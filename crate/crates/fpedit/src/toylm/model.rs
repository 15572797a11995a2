//! Model configuration, parameters, and deterministic initialization.
//!
//! The architecture is a pre-norm decoder-only transformer with learned
//! positional embeddings, GELU feed-forward blocks, and untied input and
//! output embeddings. Linear layers carry no biases; the only additive
//! parameters are the layer-norm offsets.

use crate::error::{Error, Result};
use crate::numkit::matrix::randn_matrix;
use crate::numkit::Matrix;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use super::tokenizer::EOS_ID;

/// Initialization scale for embeddings and linear weights.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub eos_token_id: u32,
    pub seed: u64,
}

impl ModelConfig {
    /// The toy defaults the bundled checkpoint is trained with.
    pub fn toy_default(vocab_size: usize, seed: u64) -> ModelConfig {
        ModelConfig {
            n_layers: 8,
            d_model: 64,
            n_heads: 4,
            d_ff: 256,
            vocab_size,
            max_seq_len: 128,
            eos_token_id: EOS_ID,
            seed,
        }
    }

    /// A much smaller shape for fast unit tests.
    pub fn tiny(vocab_size: usize, seed: u64) -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            d_model: 32,
            n_heads: 2,
            d_ff: 64,
            vocab_size,
            max_seq_len: 64,
            eos_token_id: EOS_ID,
            seed,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 {
            return Err(Error::invalid("n_layers must be at least 1".to_string()));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::invalid(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.d_model == 0 || self.d_ff == 0 {
            return Err(Error::invalid("d_model and d_ff must be positive".to_string()));
        }
        if self.vocab_size < 3 {
            return Err(Error::invalid("vocabulary must include the three specials".to_string()));
        }
        if self.max_seq_len < 2 {
            return Err(Error::invalid("max_seq_len must be at least 2".to_string()));
        }
        if self.eos_token_id as usize >= self.vocab_size {
            return Err(Error::invalid(format!(
                "eos id {} outside vocabulary of {}",
                self.eos_token_id, self.vocab_size
            )));
        }
        Ok(())
    }
}

/// Weights of one transformer block. Linear weights are stored as
/// (out_features, in_features); the forward pass computes `x W^T`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub ln1_gain: Matrix, // 1 x d_model
    pub ln1_bias: Matrix,
    pub w_q: Matrix, // d_model x d_model
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_o: Matrix,
    pub ln2_gain: Matrix,
    pub ln2_bias: Matrix,
    pub w_fc: Matrix,   // d_ff x d_model
    pub w_proj: Matrix, // d_model x d_ff — the matrix the editor rewrites
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub tok_emb: Matrix, // vocab x d_model
    pub pos_emb: Matrix, // max_seq_len x d_model
    pub layers: Vec<LayerParams>,
    pub ln_f_gain: Matrix,
    pub ln_f_bias: Matrix,
    pub w_out: Matrix, // vocab x d_model
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ModelParams,
}

impl Model {
    /// Fresh model with N(0, 0.02^2) weights drawn from `cfg.seed` in
    /// canonical matrix order; layer-norm gains start at one, offsets at
    /// zero.
    pub fn init(cfg: ModelConfig) -> Result<Model> {
        cfg.validate()?;
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(cfg.seed);
        let d = cfg.d_model;
        let mut layers = Vec::with_capacity(cfg.n_layers);
        let tok_emb = randn_matrix(cfg.vocab_size, d, INIT_STD, &mut rng);
        let pos_emb = randn_matrix(cfg.max_seq_len, d, INIT_STD, &mut rng);
        for _ in 0..cfg.n_layers {
            layers.push(LayerParams {
                ln1_gain: ones_row(d),
                ln1_bias: Matrix::zeros(1, d),
                w_q: randn_matrix(d, d, INIT_STD, &mut rng),
                w_k: randn_matrix(d, d, INIT_STD, &mut rng),
                w_v: randn_matrix(d, d, INIT_STD, &mut rng),
                w_o: randn_matrix(d, d, INIT_STD, &mut rng),
                ln2_gain: ones_row(d),
                ln2_bias: Matrix::zeros(1, d),
                w_fc: randn_matrix(cfg.d_ff, d, INIT_STD, &mut rng),
                w_proj: randn_matrix(d, cfg.d_ff, INIT_STD, &mut rng),
            });
        }
        let ln_f_gain = ones_row(d);
        let ln_f_bias = Matrix::zeros(1, d);
        let w_out = randn_matrix(cfg.vocab_size, d, INIT_STD, &mut rng);
        Ok(Model {
            cfg,
            params: ModelParams { tok_emb, pos_emb, layers, ln_f_gain, ln_f_bias, w_out },
        })
    }
}

fn ones_row(d: usize) -> Matrix {
    Matrix::from_vec(1, d, vec![1.0; d]).unwrap()
}

/// Expected (name, rows, cols) of every matrix, in the canonical order
/// shared by serialization, SGD updates, and the gradient-tape slots.
pub fn canonical_shapes(cfg: &ModelConfig) -> Vec<(String, usize, usize)> {
    let d = cfg.d_model;
    let mut out = vec![
        ("tok_emb".to_string(), cfg.vocab_size, d),
        ("pos_emb".to_string(), cfg.max_seq_len, d),
    ];
    for i in 0..cfg.n_layers {
        out.push((format!("layer{i}.ln1_gain"), 1, d));
        out.push((format!("layer{i}.ln1_bias"), 1, d));
        out.push((format!("layer{i}.w_q"), d, d));
        out.push((format!("layer{i}.w_k"), d, d));
        out.push((format!("layer{i}.w_v"), d, d));
        out.push((format!("layer{i}.w_o"), d, d));
        out.push((format!("layer{i}.ln2_gain"), 1, d));
        out.push((format!("layer{i}.ln2_bias"), 1, d));
        out.push((format!("layer{i}.w_fc"), cfg.d_ff, d));
        out.push((format!("layer{i}.w_proj"), d, cfg.d_ff));
    }
    out.push(("ln_f_gain".to_string(), 1, d));
    out.push(("ln_f_bias".to_string(), 1, d));
    out.push(("w_out".to_string(), cfg.vocab_size, d));
    out
}

impl ModelParams {
    /// All matrices in canonical order.
    pub fn matrices(&self) -> Vec<(String, &Matrix)> {
        let mut out: Vec<(String, &Matrix)> = vec![
            ("tok_emb".to_string(), &self.tok_emb),
            ("pos_emb".to_string(), &self.pos_emb),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layer{i}.ln1_gain"), &l.ln1_gain));
            out.push((format!("layer{i}.ln1_bias"), &l.ln1_bias));
            out.push((format!("layer{i}.w_q"), &l.w_q));
            out.push((format!("layer{i}.w_k"), &l.w_k));
            out.push((format!("layer{i}.w_v"), &l.w_v));
            out.push((format!("layer{i}.w_o"), &l.w_o));
            out.push((format!("layer{i}.ln2_gain"), &l.ln2_gain));
            out.push((format!("layer{i}.ln2_bias"), &l.ln2_bias));
            out.push((format!("layer{i}.w_fc"), &l.w_fc));
            out.push((format!("layer{i}.w_proj"), &l.w_proj));
        }
        out.push(("ln_f_gain".to_string(), &self.ln_f_gain));
        out.push(("ln_f_bias".to_string(), &self.ln_f_bias));
        out.push(("w_out".to_string(), &self.w_out));
        out
    }

    /// Mutable view in the same canonical order.
    pub fn matrices_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let mut out: Vec<(String, &mut Matrix)> = vec![
            ("tok_emb".to_string(), &mut self.tok_emb),
            ("pos_emb".to_string(), &mut self.pos_emb),
        ];
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.push((format!("layer{i}.ln1_gain"), &mut l.ln1_gain));
            out.push((format!("layer{i}.ln1_bias"), &mut l.ln1_bias));
            out.push((format!("layer{i}.w_q"), &mut l.w_q));
            out.push((format!("layer{i}.w_k"), &mut l.w_k));
            out.push((format!("layer{i}.w_v"), &mut l.w_v));
            out.push((format!("layer{i}.w_o"), &mut l.w_o));
            out.push((format!("layer{i}.ln2_gain"), &mut l.ln2_gain));
            out.push((format!("layer{i}.ln2_bias"), &mut l.ln2_bias));
            out.push((format!("layer{i}.w_fc"), &mut l.w_fc));
            out.push((format!("layer{i}.w_proj"), &mut l.w_proj));
        }
        out.push(("ln_f_gain".to_string(), &mut self.ln_f_gain));
        out.push(("ln_f_bias".to_string(), &mut self.ln_f_bias));
        out.push(("w_out".to_string(), &mut self.w_out));
        out
    }

    /// The transform weights that compression attacks operate on:
    /// attention projections, FFN pair, and the output head. Embedding
    /// tables and layer-norm vectors stay full precision, matching how
    /// linear-layer quantization and magnitude pruning are applied in
    /// practice.
    pub fn linear_weights_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        self.matrices_mut()
            .into_iter()
            .filter(|(name, _)| {
                name.ends_with(".w_q")
                    || name.ends_with(".w_k")
                    || name.ends_with(".w_v")
                    || name.ends_with(".w_o")
                    || name.ends_with(".w_fc")
                    || name.ends_with(".w_proj")
                    || name == "w_out"
            })
            .collect()
    }
}
