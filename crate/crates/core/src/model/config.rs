use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::VOCAB_SIZE;

/// Where the hidden state handed to the gates is tapped inside each block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum HiddenTap {
    /// Output of the pre-attention RMS norm (the attention module's input).
    #[default]
    PostNorm,
    /// Raw residual stream entering the block.
    PreNormResidual,
}

/// Shape of the frozen toy decoder.
///
/// The query projection has `n_kv_heads * group_size * d_head` outputs and the
/// key/value projections `n_kv_heads * d_head`; `d_model` is independent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_kv_heads: usize,
    pub group_size: usize,
    pub d_head: usize,
    /// SwiGLU inner width.
    pub d_ff: usize,
    pub vocab_size: usize,
    pub rope_theta: f64,
    pub max_position: usize,
    pub norm_eps: f64,
    /// Std of every projection except query/key.
    pub init_std: f64,
    /// Std of the query/key projections. Larger than `init_std` so that the
    /// untrained model has non-uniform attention.
    pub qk_init_std: f64,
    pub hidden_tap: HiddenTap,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 4,
            d_model: 64,
            n_kv_heads: 2,
            group_size: 2,
            d_head: 16,
            d_ff: 128,
            vocab_size: VOCAB_SIZE,
            rope_theta: 10_000.0,
            max_position: 4096,
            norm_eps: 1e-6,
            init_std: 0.02,
            qk_init_std: 0.2,
            hidden_tap: HiddenTap::PostNorm,
        }
    }
}

impl ModelConfig {
    pub fn n_q_heads(&self) -> usize {
        self.n_kv_heads * self.group_size
    }

    pub fn q_width(&self) -> usize {
        self.n_q_heads() * self.d_head
    }

    pub fn kv_width(&self) -> usize {
        self.n_kv_heads * self.d_head
    }

    /// KV head serving query head `q_head` (query head `h*G + j` reads KV head `h`).
    pub fn kv_head_of(&self, q_head: usize) -> usize {
        q_head / self.group_size
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_kv_heads", self.n_kv_heads),
            ("group_size", self.group_size),
            ("d_head", self.d_head),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_position", self.max_position),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::EmptyModel(format!("{name} = 0")));
        }
        if !self.d_head.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "d_head must be even for rotary embeddings, got {}",
                self.d_head
            )));
        }
        if !(self.rope_theta > 0.0 && self.rope_theta.is_finite()) {
            return Err(Error::Config("rope_theta must be positive".into()));
        }
        if !(self.norm_eps > 0.0) {
            return Err(Error::Config("norm_eps must be positive".into()));
        }
        if !(self.init_std >= 0.0 && self.qk_init_std >= 0.0) {
            return Err(Error::Config("init std must be non-negative".into()));
        }
        Ok(())
    }

    /// Parameter count of one attention block (q, k, v, o projections).
    pub fn attention_params(&self) -> usize {
        self.d_model * (self.q_width() * 2 + self.kv_width() * 2)
    }

    pub fn total_params(&self) -> usize {
        let per_layer = self.attention_params() + 2 * self.d_model + 3 * self.d_model * self.d_ff;
        2 * self.vocab_size * self.d_model + self.n_layers * per_layer + self.d_model
    }
}
