//! Distillation targets: the largest attention probability each KV pair
//! receives from a set of queries, taken from the dense attention oracle.
//!
//! The reconstruction target feeds `ctx ++ prompt ++ ctx` through the frozen
//! model and, for every position of the first copy, keeps the maximum over the
//! queries of the second copy and over the query heads sharing its KV head.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::bruteforce::for_each_layer_attention;
use crate::model::Transformer;
use crate::tokenizer::{encode, REPEAT_SEP};

pub const DEFAULT_REPEAT_TEXT: &str = "\n\nRepeat the previous context:\n\n";

/// Values in `[0, 1]` indexed `(layer, kv head, position)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceScores {
    pub n_layers: usize,
    pub n_heads: usize,
    pub len: usize,
    pub data: Vec<f32>,
}

impl ImportanceScores {
    pub fn zeros(n_layers: usize, n_heads: usize, len: usize) -> Self {
        Self {
            n_layers,
            n_heads,
            len,
            data: vec![0.0; n_layers * n_heads * len],
        }
    }

    fn idx(&self, layer: usize, head: usize, pos: usize) -> usize {
        (layer * self.n_heads + head) * self.len + pos
    }

    pub fn get(&self, layer: usize, head: usize, pos: usize) -> f32 {
        self.data[self.idx(layer, head, pos)]
    }

    pub fn set(&mut self, layer: usize, head: usize, pos: usize, v: f32) {
        let i = self.idx(layer, head, pos);
        self.data[i] = v;
    }

    /// `len x n_heads` row-major block of one layer (token-major), the layout
    /// used by shards and gates.
    pub fn layer_token_major(&self, layer: usize) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.len * self.n_heads);
        for pos in 0..self.len {
            for h in 0..self.n_heads {
                out.push(self.get(layer, h, pos));
            }
        }
        out
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| f64::from(v)).sum::<f64>() / self.data.len().max(1) as f64
    }

    pub fn layer_mean(&self, layer: usize) -> f64 {
        let block = self.n_heads * self.len;
        self.data[layer * block..(layer + 1) * block]
            .iter()
            .map(|&v| f64::from(v))
            .sum::<f64>()
            / block.max(1) as f64
    }
}

/// Options for the reconstruction oracle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TargetConfig {
    pub repeat_text: String,
    /// Also let the repeat-prompt tokens act as queries.
    pub include_prompt_queries: bool,
}

impl Default for TargetConfig {
    fn default() -> Self {
        Self {
            repeat_text: DEFAULT_REPEAT_TEXT.into(),
            include_prompt_queries: false,
        }
    }
}

impl TargetConfig {
    /// The repeat prompt wrapped in separator specials.
    pub fn prompt_tokens(&self) -> Vec<u32> {
        let mut p = vec![REPEAT_SEP];
        p.extend(encode(&self.repeat_text));
        p.push(REPEAT_SEP);
        p
    }
}

/// `[ctx ++ prompt ++ ctx]` with the ranges of both copies.
#[derive(Debug, Clone, PartialEq)]
pub struct ReconstructionLayout {
    pub tokens: Vec<u32>,
    pub key_range: Range<usize>,
    pub query_range: Range<usize>,
}

pub fn build_reconstruction_layout(
    ctx: &[u32],
    prompt: &[u32],
    max_position: usize,
) -> Result<ReconstructionLayout> {
    if ctx.is_empty() {
        return Err(Error::InvalidInput("reconstruction context is empty".into()));
    }
    let total = 2 * ctx.len() + prompt.len();
    if total > max_position {
        return Err(Error::PositionOverflow {
            position: total - 1,
            max_position,
        });
    }
    let mut tokens = Vec::with_capacity(total);
    tokens.extend_from_slice(ctx);
    tokens.extend_from_slice(prompt);
    tokens.extend_from_slice(ctx);
    Ok(ReconstructionLayout {
        tokens,
        key_range: 0..ctx.len(),
        query_range: ctx.len() + prompt.len()..total,
    })
}

/// For every layer, KV head and key in `keys`: the maximum attention paid by
/// any query row in `queries` through any query head of that KV head's group.
pub fn max_attention_targets(
    model: &Transformer,
    tokens: &[u32],
    keys: Range<usize>,
    queries: &[usize],
) -> Result<ImportanceScores> {
    let cfg = &model.config;
    let t = tokens.len();
    if keys.end > t || queries.iter().any(|&q| q >= t) {
        return Err(Error::InvalidInput("key/query range outside sequence".into()));
    }
    let mut scores = ImportanceScores::zeros(cfg.n_layers, cfg.n_kv_heads, keys.len());
    let mut acc = vec![0f64; keys.len()];
    for_each_layer_attention(model, tokens, |layer, block| {
        for h in 0..cfg.n_kv_heads {
            acc.fill(0.0);
            for qh in h * cfg.group_size..(h + 1) * cfg.group_size {
                let head = &block[qh * t * t..(qh + 1) * t * t];
                for &row in queries {
                    let r = &head[row * t..(row + 1) * t];
                    for (a, p) in acc.iter_mut().zip(&r[keys.clone()]) {
                        *a = a.max(*p);
                    }
                }
            }
            for (i, a) in acc.iter().enumerate() {
                scores.set(layer, h, i, *a as f32);
            }
        }
    })?;
    Ok(scores)
}

/// Reconstruction targets over the positions of `ctx`.
pub fn compute_reconstruction_targets(
    model: &Transformer,
    ctx: &[u32],
    cfg: &TargetConfig,
) -> Result<ImportanceScores> {
    let prompt = cfg.prompt_tokens();
    let layout = build_reconstruction_layout(ctx, &prompt, model.config.max_position)?;
    let first_query = if cfg.include_prompt_queries {
        layout.key_range.end
    } else {
        layout.query_range.start
    };
    let queries: Vec<usize> = (first_query..layout.query_range.end).collect();
    max_attention_targets(model, &layout.tokens, layout.key_range, &queries)
}

/// Next-token variant: every position of a plain causal pass over `seq` is
/// both a key and a query.
pub fn compute_next_token_targets(model: &Transformer, seq: &[u32]) -> Result<ImportanceScores> {
    let queries: Vec<usize> = (0..seq.len()).collect();
    max_attention_targets(model, seq, 0..seq.len(), &queries)
}
