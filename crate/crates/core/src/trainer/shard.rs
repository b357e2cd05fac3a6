//! Per-layer training shards: gate-input hidden states paired with
//! reconstruction targets, stored in `FKVT` containers.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::format::{decode_container, encode_container, read_file, write_atomic};
use crate::model::{Capture, Transformer};
use crate::targets::{compute_reconstruction_targets, TargetConfig};

pub const SHARD_MAGIC: &[u8; 4] = b"FKVT";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ShardProvenance {
    pub corpus_hash: String,
    pub model_seed: u64,
    pub sample_seed: u64,
    pub targets: TargetConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ShardHeader {
    layer: usize,
    n_kv_heads: usize,
    d_model: usize,
    counts: Vec<usize>,
    provenance: ShardProvenance,
}

/// Training tuples of one layer. Row `i` of `hidden` (`d_model` wide) pairs
/// with row `i` of `targets` (`n_heads` wide).
#[derive(Debug, Clone, PartialEq)]
pub struct Shard {
    pub layer: usize,
    pub d_model: usize,
    pub n_heads: usize,
    /// Tokens contributed by each context, in sampling order.
    pub counts: Vec<usize>,
    pub hidden: Vec<f32>,
    pub targets: Vec<f32>,
    pub provenance: ShardProvenance,
}

impl Shard {
    pub fn len(&self) -> usize {
        self.targets.len() / self.n_heads.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn hidden_row(&self, i: usize) -> &[f32] {
        &self.hidden[i * self.d_model..(i + 1) * self.d_model]
    }

    pub fn target_row(&self, i: usize) -> &[f32] {
        &self.targets[i * self.n_heads..(i + 1) * self.n_heads]
    }

    /// Copies the selected rows into contiguous hidden and target buffers.
    pub fn gather(&self, rows: &[usize]) -> (Vec<f32>, Vec<f32>) {
        let mut h = Vec::with_capacity(rows.len() * self.d_model);
        let mut t = Vec::with_capacity(rows.len() * self.n_heads);
        for &r in rows {
            h.extend_from_slice(self.hidden_row(r));
            t.extend_from_slice(self.target_row(r));
        }
        (h, t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = ShardHeader {
            layer: self.layer,
            n_kv_heads: self.n_heads,
            d_model: self.d_model,
            counts: self.counts.clone(),
            provenance: self.provenance.clone(),
        };
        let mut payload = Vec::with_capacity(self.hidden.len() + self.targets.len());
        let (mut h0, mut t0) = (0, 0);
        for &c in &self.counts {
            payload.extend_from_slice(&self.hidden[h0..h0 + c * self.d_model]);
            payload.extend_from_slice(&self.targets[t0..t0 + c * self.n_heads]);
            h0 += c * self.d_model;
            t0 += c * self.n_heads;
        }
        encode_container(SHARD_MAGIC, &header, &payload)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, payload): (ShardHeader, Vec<f32>) = decode_container(SHARD_MAGIC, bytes)?;
        let (d, h) = (header.d_model, header.n_kv_heads);
        let total: usize = header.counts.iter().sum();
        if payload.len() != total * (d + h) {
            return Err(Error::Format(format!(
                "shard payload has {} values, header implies {}",
                payload.len(),
                total * (d + h)
            )));
        }
        let mut hidden = Vec::with_capacity(total * d);
        let mut targets = Vec::with_capacity(total * h);
        let mut off = 0;
        for &c in &header.counts {
            hidden.extend_from_slice(&payload[off..off + c * d]);
            off += c * d;
            targets.extend_from_slice(&payload[off..off + c * h]);
            off += c * h;
        }
        Ok(Self {
            layer: header.layer,
            d_model: d,
            n_heads: h,
            counts: header.counts,
            hidden,
            targets,
            provenance: header.provenance,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }
}

pub fn shard_path(dir: &Path, layer: usize) -> PathBuf {
    dir.join(format!("layer_{layer:02}.fkvt"))
}

/// Runs the frozen model over every context and returns one shard per layer.
/// Contexts are processed in parallel; results keep sampling order, so the
/// output does not depend on the thread count.
pub fn build_shards(
    model: &Transformer,
    contexts: &[Vec<u32>],
    targets: &TargetConfig,
    provenance: ShardProvenance,
) -> Result<Vec<Shard>> {
    let cfg = &model.config;
    let per_ctx: Vec<(Vec<Vec<f32>>, Vec<Vec<f32>>)> = contexts
        .par_iter()
        .map(|ctx| {
            let (out, _) = model.forward_full(ctx, Capture::HIDDEN)?;
            let scores = compute_reconstruction_targets(model, ctx, targets)?;
            let t = (0..cfg.n_layers).map(|l| scores.layer_token_major(l)).collect();
            Ok((out.hidden, t))
        })
        .collect::<Result<_>>()?;
    let counts: Vec<usize> = contexts.iter().map(Vec::len).collect();
    Ok((0..cfg.n_layers)
        .map(|layer| {
            let mut hidden = Vec::new();
            let mut tg = Vec::new();
            for (h, t) in &per_ctx {
                hidden.extend_from_slice(&h[layer]);
                tg.extend_from_slice(&t[layer]);
            }
            Shard {
                layer,
                d_model: cfg.d_model,
                n_heads: cfg.n_kv_heads,
                counts: counts.clone(),
                hidden,
                targets: tg,
                provenance: provenance.clone(),
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, ModelConfig};

    #[test]
    fn build_and_roundtrip() {
        let cfg = ModelConfig {
            n_layers: 2,
            d_model: 16,
            d_head: 4,
            d_ff: 24,
            max_position: 512,
            ..ModelConfig::default()
        };
        let model = init_model(&cfg, 3).unwrap();
        let ctxs = vec![vec![65u32, 66, 67, 68, 69], vec![70, 71, 72]];
        let shards = build_shards(&model, &ctxs, &TargetConfig::default(), ShardProvenance::default()).unwrap();
        assert_eq!(shards.len(), 2);
        let s = &shards[1];
        assert_eq!(s.len(), 8);
        assert_eq!(s.hidden.len(), 8 * 16);
        assert!(s.targets.iter().all(|v| (0.0..=1.0).contains(v)));
        let back = Shard::from_bytes(&s.to_bytes().unwrap()).unwrap();
        assert_eq!(&back, s);
        assert_eq!(s.to_bytes().unwrap(), back.to_bytes().unwrap());
    }
}
