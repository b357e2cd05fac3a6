//! Frozen toy decoder-only transformer with grouped-query attention, rotary
//! position embeddings and an explicit KV cache.
//!
//! Pre-norm blocks: `x += Attn(RMSNorm(x))`, `x += SwiGLU(RMSNorm(x))`. Query
//! head `h*G + j` attends over KV head `h`. All reductions accumulate in f64
//! and every activation is rounded to f32 at the same points regardless of
//! how a sequence is split into calls, so chunked and one-shot runs over the
//! same cache contents are bit-identical.

pub mod bruteforce;
pub mod cache;
pub mod config;
pub mod ops;
pub mod rope;
pub mod weights;

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use cache::{CompressedKvCache, HeadCache, KvCache, LayerCache};
pub use config::{HiddenTap, ModelConfig};
pub use rope::apply_rope;
pub use weights::{tensor_layout, LayerWeights, TensorSpec, TransformerWeights};

use crate::error::{Error, Result};
use crate::format;
use ops::{matvec, rms_norm, silu, softmax_in_place};

pub const MODEL_MAGIC: &[u8; 4] = b"FKVM";

/// Below this many new tokens the per-token loops stay sequential.
const PAR_THRESHOLD: usize = 16;

/// A frozen model: config, the seed it was drawn from, and its weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Transformer {
    pub config: ModelConfig,
    pub seed: u64,
    pub weights: TransformerWeights,
}

/// What `forward` should record besides logits.
#[derive(Debug, Clone, Copy, Default)]
pub struct Capture {
    pub hidden: bool,
    pub attention: bool,
}

impl Capture {
    pub const NONE: Capture = Capture {
        hidden: false,
        attention: false,
    };
    pub const HIDDEN: Capture = Capture {
        hidden: true,
        attention: false,
    };
    pub const ALL: Capture = Capture {
        hidden: true,
        attention: true,
    };
}

/// Attention probabilities of one query head for the new tokens of a call.
/// Row `i` holds the weights of new token `i` over `key_positions`; keys
/// after the query position are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadAttention {
    pub key_positions: Vec<usize>,
    pub probs: Vec<f64>,
}

impl HeadAttention {
    pub fn row(&self, i: usize) -> &[f64] {
        let n = self.key_positions.len();
        &self.probs[i * n..(i + 1) * n]
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Positions assigned to the new tokens.
    pub positions: Vec<usize>,
    /// Per layer, `n_new x d_model` gate-input hidden states (empty unless captured).
    pub hidden: Vec<Vec<f32>>,
    /// `n_new x vocab_size`.
    pub logits: Vec<f32>,
    /// Per layer, per query head.
    pub attention: Option<Vec<Vec<HeadAttention>>>,
}

impl ForwardOutput {
    pub fn logits_row(&self, i: usize, vocab: usize) -> &[f32] {
        &self.logits[i * vocab..(i + 1) * vocab]
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    config: ModelConfig,
    seed: u64,
    tensors: Vec<TensorSpec>,
}

/// Draws a model deterministically from `(config, seed)`.
pub fn init_model(config: &ModelConfig, seed: u64) -> Result<Transformer> {
    Ok(Transformer {
        config: config.clone(),
        seed,
        weights: TransformerWeights::init(config, seed)?,
    })
}

impl Transformer {
    pub fn empty_cache(&self) -> KvCache {
        KvCache::new(
            self.config.n_layers,
            self.config.n_kv_heads,
            self.config.d_head,
        )
    }

    /// Runs `tokens` after whatever `cache` already holds, appending their
    /// keys/values (unscored) to every head.
    pub fn forward(
        &self,
        tokens: &[u32],
        cache: &mut KvCache,
        capture: Capture,
    ) -> Result<ForwardOutput> {
        let cfg = &self.config;
        if tokens.is_empty() {
            return Err(Error::InvalidInput("forward needs at least one token".into()));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
            return Err(Error::InvalidInput(format!(
                "token id {bad} outside vocabulary of {}",
                cfg.vocab_size
            )));
        }
        if cache.n_layers() != cfg.n_layers
            || cache.layers.iter().any(|l| l.heads.len() != cfg.n_kv_heads)
        {
            return Err(Error::Shape("cache layout does not match model".into()));
        }
        let start = cache.seen_tokens();
        let n = tokens.len();
        if start + n > cfg.max_position {
            return Err(Error::PositionOverflow {
                position: start + n - 1,
                max_position: cfg.max_position,
            });
        }
        let positions: Vec<usize> = (start..start + n).collect();
        let d = cfg.d_model;
        let (dh, g, qh_count) = (cfg.d_head, cfg.group_size, cfg.n_q_heads());
        let scale = 1.0 / (dh as f64).sqrt();

        let mut x: Vec<f32> = tokens
            .iter()
            .flat_map(|&t| self.weights.embed[t as usize * d..(t as usize + 1) * d].iter().copied())
            .collect();
        let mut hidden = Vec::new();
        let mut attention = capture.attention.then(Vec::new);

        for (l, lw) in self.weights.layers.iter().enumerate() {
            let normed: Vec<Vec<f32>> = x
                .chunks_exact(d)
                .map(|row| rms_norm(row, &lw.attn_norm, cfg.norm_eps))
                .collect();
            if capture.hidden {
                hidden.push(match cfg.hidden_tap {
                    HiddenTap::PostNorm => normed.concat(),
                    HiddenTap::PreNormResidual => x.clone(),
                });
            }

            let mut qs = vec![0f32; n * cfg.q_width()];
            let mut ks = vec![0f32; n * cfg.kv_width()];
            let mut vs = vec![0f32; n * cfg.kv_width()];
            for (i, a) in normed.iter().enumerate() {
                let q = &mut qs[i * cfg.q_width()..(i + 1) * cfg.q_width()];
                matvec(&lw.wq, a, q);
                for head in q.chunks_exact_mut(dh) {
                    rope::rope_in_place(head, positions[i], cfg.rope_theta)?;
                }
                let k = &mut ks[i * cfg.kv_width()..(i + 1) * cfg.kv_width()];
                matvec(&lw.wk, a, k);
                for head in k.chunks_exact_mut(dh) {
                    rope::rope_in_place(head, positions[i], cfg.rope_theta)?;
                }
                matvec(&lw.wv, a, &mut vs[i * cfg.kv_width()..(i + 1) * cfg.kv_width()]);
            }

            let layer_cache = &mut cache.layers[l];
            for i in 0..n {
                for (h, head) in layer_cache.heads.iter_mut().enumerate() {
                    let off = i * cfg.kv_width() + h * dh;
                    head.push(positions[i], &ks[off..off + dh], &vs[off..off + dh]);
                }
            }
            let layer_cache = &cache.layers[l];

            // Per new token: concatenated head outputs plus optional probability rows.
            let attend = |i: usize| -> (Vec<f32>, Vec<Vec<f64>>) {
                let mut out = vec![0f32; cfg.q_width()];
                let mut rows = Vec::new();
                for qh in 0..qh_count {
                    let head = &layer_cache.heads[qh / g];
                    let visible = head.visible_upto(positions[i]);
                    let q = &qs[i * cfg.q_width() + qh * dh..i * cfg.q_width() + (qh + 1) * dh];
                    let mut p: Vec<f64> = (0..visible)
                        .map(|j| ops::dot(q, head.key(j)) * scale)
                        .collect();
                    softmax_in_place(&mut p);
                    let mut acc = vec![0f64; dh];
                    for (j, pj) in p.iter().enumerate() {
                        for (a, v) in acc.iter_mut().zip(head.value(j)) {
                            *a += pj * *v as f64;
                        }
                    }
                    for (o, a) in out[qh * dh..(qh + 1) * dh].iter_mut().zip(&acc) {
                        *o = *a as f32;
                    }
                    if capture.attention {
                        p.resize(head.len(), 0.0);
                        rows.push(p);
                    }
                }
                (out, rows)
            };
            let attended: Vec<(Vec<f32>, Vec<Vec<f64>>)> = if n >= PAR_THRESHOLD {
                (0..n).into_par_iter().map(attend).collect()
            } else {
                (0..n).map(attend).collect()
            };

            if let Some(att) = attention.as_mut() {
                let per_head = (0..qh_count)
                    .map(|qh| {
                        let head = &layer_cache.heads[qh / g];
                        HeadAttention {
                            key_positions: head.positions().to_vec(),
                            probs: attended.iter().flat_map(|(_, r)| r[qh].iter().copied()).collect(),
                        }
                    })
                    .collect();
                att.push(per_head);
            }

            let block = |(row, (attn_out, _)): (&mut [f32], &(Vec<f32>, Vec<Vec<f64>>))| {
                let mut o = vec![0f32; d];
                matvec(&lw.wo, attn_out, &mut o);
                for (xv, ov) in row.iter_mut().zip(&o) {
                    *xv += *ov;
                }
                let m = rms_norm(row, &lw.mlp_norm, cfg.norm_eps);
                let mut gate = vec![0f32; cfg.d_ff];
                let mut up = vec![0f32; cfg.d_ff];
                matvec(&lw.w_gate, &m, &mut gate);
                matvec(&lw.w_up, &m, &mut up);
                let z: Vec<f32> = gate
                    .iter()
                    .zip(&up)
                    .map(|(a, b)| (silu(*a as f64) * *b as f64) as f32)
                    .collect();
                let mut down = vec![0f32; d];
                matvec(&lw.w_down, &z, &mut down);
                for (xv, dv) in row.iter_mut().zip(&down) {
                    *xv += *dv;
                }
            };
            if n >= PAR_THRESHOLD {
                x.par_chunks_mut(d).zip(attended.par_iter()).for_each(block);
            } else {
                x.chunks_mut(d).zip(attended.iter()).for_each(block);
            }
        }

        let v = cfg.vocab_size;
        let mut logits = vec![0f32; n * v];
        let head_fn = |(out, row): (&mut [f32], &[f32])| {
            let f = rms_norm(row, &self.weights.final_norm, cfg.norm_eps);
            matvec(&self.weights.lm_head, &f, out);
        };
        if n >= PAR_THRESHOLD {
            logits.par_chunks_mut(v).zip(x.par_chunks(d)).for_each(head_fn);
        } else {
            logits.chunks_mut(v).zip(x.chunks(d)).for_each(head_fn);
        }

        cache.advance(n);
        Ok(ForwardOutput {
            positions,
            hidden,
            logits,
            attention,
        })
    }

    /// Forward over `tokens` from an empty cache.
    pub fn forward_full(&self, tokens: &[u32], capture: Capture) -> Result<(ForwardOutput, KvCache)> {
        let mut cache = self.empty_cache();
        let out = self.forward(tokens, &mut cache, capture)?;
        Ok((out, cache))
    }

    pub fn to_checkpoint_bytes(&self) -> Result<Vec<u8>> {
        let header = CheckpointHeader {
            config: self.config.clone(),
            seed: self.seed,
            tensors: tensor_layout(&self.config),
        };
        format::encode_container(MODEL_MAGIC, &header, &self.weights.to_flat())
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, payload): (CheckpointHeader, Vec<f32>) =
            format::decode_container(MODEL_MAGIC, bytes)?;
        header.config.validate()?;
        if header.tensors != tensor_layout(&header.config) {
            return Err(Error::Format(
                "FKVM tensor table does not match the declared config".into(),
            ));
        }
        Ok(Self {
            weights: TransformerWeights::from_flat(&header.config, &payload)?,
            config: header.config,
            seed: header.seed,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        format::write_atomic(path, &self.to_checkpoint_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint_bytes(&format::read_file(path)?)
    }
}
