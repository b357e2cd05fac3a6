//! Dense reference for the attention probabilities of a whole sequence.
//!
//! Recomputes the network with full `T x T` score matrices and an explicit
//! causal mask instead of going through the KV cache. It shares nothing with
//! [`Transformer::forward`] except the weights and the rotary rotation, so the
//! two can check each other.

use rayon::prelude::*;

use super::rope::rope_in_place;
use super::Transformer;
use crate::error::{Error, Result};

/// Attention probabilities for every layer and query head, each a dense
/// lower-triangular `len x len` matrix (row = query, column = key).
#[derive(Debug, Clone, PartialEq)]
pub struct DenseAttention {
    pub n_layers: usize,
    pub n_q_heads: usize,
    pub len: usize,
    pub probs: Vec<f64>,
}

impl DenseAttention {
    pub fn get(&self, layer: usize, q_head: usize, query: usize, key: usize) -> f64 {
        self.probs[((layer * self.n_q_heads + q_head) * self.len + query) * self.len + key]
    }

    /// `n_q_heads x len x len` block of one layer.
    pub fn layer(&self, layer: usize) -> &[f64] {
        let block = self.n_q_heads * self.len * self.len;
        &self.probs[layer * block..(layer + 1) * block]
    }
}

/// `a (n x k) * b^T` where `b` is `m x k`; result `n x m`, f64 accumulation.
fn matmul_bt(a: &[f32], b: &[f32], k: usize) -> Vec<f32> {
    let n = a.len() / k;
    let m = b.len() / k;
    let mut out = vec![0f32; n * m];
    for i in 0..n {
        for j in 0..m {
            let mut s = 0f64;
            for t in 0..k {
                s += a[i * k + t] as f64 * b[j * k + t] as f64;
            }
            out[i * m + j] = s as f32;
        }
    }
    out
}

fn rms_rows(x: &[f32], gamma: &[f32], eps: f64) -> Vec<f32> {
    let d = gamma.len();
    let mut out = vec![0f32; x.len()];
    for (row, o) in x.chunks(d).zip(out.chunks_mut(d)) {
        let mut ss = 0f64;
        for v in row {
            ss += (*v as f64) * (*v as f64);
        }
        let r = 1.0 / (ss / d as f64 + eps).sqrt();
        for c in 0..d {
            o[c] = (row[c] as f64 * r * gamma[c] as f64) as f32;
        }
    }
    out
}

/// Calls `visit(layer, probs)` once per layer in order, where `probs` is the
/// `n_q_heads x T x T` attention block of that layer. Only one layer is
/// materialized at a time.
pub fn for_each_layer_attention(
    model: &Transformer,
    tokens: &[u32],
    mut visit: impl FnMut(usize, &[f64]),
) -> Result<()> {
    let cfg = &model.config;
    let t = tokens.len();
    if t == 0 {
        return Err(Error::InvalidInput("empty sequence".into()));
    }
    if t > cfg.max_position {
        return Err(Error::PositionOverflow {
            position: t - 1,
            max_position: cfg.max_position,
        });
    }
    let (d, dh, g) = (cfg.d_model, cfg.d_head, cfg.group_size);
    let nq = cfg.n_q_heads();
    let mut x = vec![0f32; t * d];
    for (i, &tok) in tokens.iter().enumerate() {
        let tok = tok as usize;
        if tok >= cfg.vocab_size {
            return Err(Error::InvalidInput(format!("token id {tok} outside vocabulary")));
        }
        x[i * d..(i + 1) * d].copy_from_slice(&model.weights.embed[tok * d..(tok + 1) * d]);
    }

    for (l, lw) in model.weights.layers.iter().enumerate() {
        let a = rms_rows(&x, &lw.attn_norm, cfg.norm_eps);
        let mut q = matmul_bt(&a, &lw.wq, d);
        let mut k = matmul_bt(&a, &lw.wk, d);
        let v = matmul_bt(&a, &lw.wv, d);
        for i in 0..t {
            for head in q[i * cfg.q_width()..(i + 1) * cfg.q_width()].chunks_mut(dh) {
                rope_in_place(head, i, cfg.rope_theta)?;
            }
            for head in k[i * cfg.kv_width()..(i + 1) * cfg.kv_width()].chunks_mut(dh) {
                rope_in_place(head, i, cfg.rope_theta)?;
            }
        }

        // probs[qh][row][col]
        let scale = (dh as f64).sqrt();
        let mut probs = vec![0f64; nq * t * t];
        probs.par_chunks_mut(t * t).enumerate().for_each(|(qh, block)| {
            let kvh = qh / g;
            for row in 0..t {
                let scores = &mut block[row * t..(row + 1) * t];
                let qv = &q[row * cfg.q_width() + qh * dh..][..dh];
                for (col, s) in scores[..=row].iter_mut().enumerate() {
                    let kv = &k[col * cfg.kv_width() + kvh * dh..][..dh];
                    *s = qv.iter().zip(kv).map(|(a, b)| *a as f64 * *b as f64).sum::<f64>() / scale;
                }
                let m = scores[..=row].iter().copied().fold(f64::NEG_INFINITY, f64::max);
                for s in scores[..=row].iter_mut() {
                    *s = (*s - m).exp();
                }
                let z: f64 = scores[..=row].iter().sum();
                for s in scores[..=row].iter_mut() {
                    *s /= z;
                }
            }
        });

        let mut attn = vec![0f32; t * cfg.q_width()];
        attn.par_chunks_mut(cfg.q_width()).enumerate().for_each(|(row, out)| {
            let mut acc = vec![0f64; dh];
            for qh in 0..nq {
                let kvh = qh / g;
                acc.fill(0.0);
                for col in 0..=row {
                    let p = probs[(qh * t + row) * t + col];
                    let vv = &v[col * cfg.kv_width() + kvh * dh..][..dh];
                    for (a, x) in acc.iter_mut().zip(vv) {
                        *a += p * *x as f64;
                    }
                }
                for (o, a) in out[qh * dh..(qh + 1) * dh].iter_mut().zip(&acc) {
                    *o = *a as f32;
                }
            }
        });
        visit(l, &probs);

        let o = matmul_bt(&attn, &lw.wo, cfg.q_width());
        for (xv, ov) in x.iter_mut().zip(&o) {
            *xv += *ov;
        }
        let m = rms_rows(&x, &lw.mlp_norm, cfg.norm_eps);
        let gate = matmul_bt(&m, &lw.w_gate, d);
        let up = matmul_bt(&m, &lw.w_up, d);
        let z: Vec<f32> = gate
            .iter()
            .zip(&up)
            .map(|(a, b)| {
                let a = *a as f64;
                (a / (1.0 + (-a).exp()) * *b as f64) as f32
            })
            .collect();
        let down = matmul_bt(&z, &lw.w_down, cfg.d_ff);
        for (xv, dv) in x.iter_mut().zip(&down) {
            *xv += *dv;
        }
    }
    Ok(())
}

/// Materializes every layer's attention matrices.
pub fn attention_matrix_bruteforce(model: &Transformer, tokens: &[u32]) -> Result<DenseAttention> {
    let mut probs = Vec::new();
    for_each_layer_attention(model, tokens, |_, block| probs.extend_from_slice(block))?;
    Ok(DenseAttention {
        n_layers: model.config.n_layers,
        n_q_heads: model.config.n_q_heads(),
        len: tokens.len(),
        probs,
    })
}
