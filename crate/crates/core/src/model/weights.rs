use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    /// `q_width x d_model`
    pub wq: Vec<f32>,
    /// `kv_width x d_model`
    pub wk: Vec<f32>,
    pub wv: Vec<f32>,
    /// `d_model x q_width`
    pub wo: Vec<f32>,
    pub attn_norm: Vec<f32>,
    pub mlp_norm: Vec<f32>,
    /// `d_ff x d_model`
    pub w_gate: Vec<f32>,
    pub w_up: Vec<f32>,
    /// `d_model x d_ff`
    pub w_down: Vec<f32>,
}

/// Frozen parameters of the toy decoder. Never mutated after creation.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformerWeights {
    /// `vocab_size x d_model`
    pub embed: Vec<f32>,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Vec<f32>,
    /// `vocab_size x d_model`
    pub lm_head: Vec<f32>,
}

/// Name and shape of one stored tensor, in checkpoint order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

impl TensorSpec {
    fn new(name: impl Into<String>, shape: &[usize]) -> Self {
        Self {
            name: name.into(),
            shape: shape.to_vec(),
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Tensor order shared by initialization and the checkpoint payload.
pub fn tensor_layout(cfg: &ModelConfig) -> Vec<TensorSpec> {
    let (d, f, v) = (cfg.d_model, cfg.d_ff, cfg.vocab_size);
    let mut specs = vec![TensorSpec::new("embed", &[v, d])];
    for l in 0..cfg.n_layers {
        let p = |n: &str| format!("layers.{l}.{n}");
        specs.extend([
            TensorSpec::new(p("wq"), &[cfg.q_width(), d]),
            TensorSpec::new(p("wk"), &[cfg.kv_width(), d]),
            TensorSpec::new(p("wv"), &[cfg.kv_width(), d]),
            TensorSpec::new(p("wo"), &[d, cfg.q_width()]),
            TensorSpec::new(p("attn_norm"), &[d]),
            TensorSpec::new(p("mlp_norm"), &[d]),
            TensorSpec::new(p("w_gate"), &[f, d]),
            TensorSpec::new(p("w_up"), &[f, d]),
            TensorSpec::new(p("w_down"), &[d, f]),
        ]);
    }
    specs.push(TensorSpec::new("final_norm", &[d]));
    specs.push(TensorSpec::new("lm_head", &[v, d]));
    specs
}

impl TransformerWeights {
    /// Draws weights from a ChaCha8 stream seeded with `seed`, tensor by
    /// tensor in [`tensor_layout`] order. Norm scales are ones, query/key
    /// projections use `qk_init_std`, everything else `init_std`.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base = Normal::new(0.0, cfg.init_std).map_err(|e| Error::Config(e.to_string()))?;
        let qk = Normal::new(0.0, cfg.qk_init_std).map_err(|e| Error::Config(e.to_string()))?;
        let flat: Vec<Vec<f32>> = tensor_layout(cfg)
            .iter()
            .map(|spec| {
                let n = spec.numel();
                if spec.name.ends_with("norm") {
                    vec![1.0; n]
                } else {
                    let dist = if spec.name.ends_with(".wq") || spec.name.ends_with(".wk") {
                        &qk
                    } else {
                        &base
                    };
                    (0..n).map(|_| dist.sample(&mut rng) as f32).collect()
                }
            })
            .collect();
        Self::from_tensors(cfg, flat)
    }

    fn from_tensors(cfg: &ModelConfig, tensors: Vec<Vec<f32>>) -> Result<Self> {
        let expected = 3 + 9 * cfg.n_layers;
        if tensors.len() != expected {
            return Err(Error::Format(format!(
                "expected {expected} tensors, got {}",
                tensors.len()
            )));
        }
        let mut it = tensors.into_iter();
        let embed = it.next().unwrap();
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for _ in 0..cfg.n_layers {
            let mut next = || it.next().unwrap();
            layers.push(LayerWeights {
                wq: next(),
                wk: next(),
                wv: next(),
                wo: next(),
                attn_norm: next(),
                mlp_norm: next(),
                w_gate: next(),
                w_up: next(),
                w_down: next(),
            });
        }
        let final_norm = it.next().unwrap();
        let lm_head = it.next().unwrap();
        Ok(Self {
            embed,
            layers,
            final_norm,
            lm_head,
        })
    }

    /// Tensors in checkpoint order.
    pub fn tensors(&self) -> Vec<&[f32]> {
        let mut out: Vec<&[f32]> = vec![&self.embed];
        for l in &self.layers {
            out.extend([
                l.wq.as_slice(),
                &l.wk,
                &l.wv,
                &l.wo,
                &l.attn_norm,
                &l.mlp_norm,
                &l.w_gate,
                &l.w_up,
                &l.w_down,
            ]);
        }
        out.push(&self.final_norm);
        out.push(&self.lm_head);
        out
    }

    /// Rebuilds weights from a flat payload laid out per [`tensor_layout`].
    pub fn from_flat(cfg: &ModelConfig, payload: &[f32]) -> Result<Self> {
        let layout = tensor_layout(cfg);
        let total: usize = layout.iter().map(TensorSpec::numel).sum();
        if payload.len() != total {
            return Err(Error::Format(format!(
                "payload holds {} floats, layout needs {total}",
                payload.len()
            )));
        }
        let mut offset = 0;
        let tensors = layout
            .iter()
            .map(|s| {
                let t = payload[offset..offset + s.numel()].to_vec();
                offset += s.numel();
                t
            })
            .collect();
        Self::from_tensors(cfg, tensors)
    }

    pub fn to_flat(&self) -> Vec<f32> {
        self.tensors().concat()
    }

    /// Little-endian bytes of every tensor, for equality checks.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.tensors()
            .iter()
            .flat_map(|t| t.iter().flat_map(|v| v.to_le_bytes()))
            .collect()
    }
}
