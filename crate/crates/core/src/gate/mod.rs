//! Low-rank sink-attention gates mapping a hidden state `h in R^D` to one
//! importance score in `(0, 1)` per KV head.
//!
//! For head `h` with group members `j = 1..G`:
//!
//! ```text
//! k_h   = RMSNorm_{gamma_k}(W_k x)[h]           (D' wide)
//! q_jh  = RMSNorm_{gamma_q}(W_q x)[j, h]
//! s_h   = 1/G * sum_j exp(q_jh . k_h)
//!                   / (exp(q_jh . k_h) + sum_r exp(q_jh . k_sink[r, h]) + b_jh)
//! b_jh  = softplus(beta_jh) >= 0
//! ```
//!
//! Gates carry no positional encoding, so a token's score depends only on
//! its own hidden state. The `no_denominator`, `mlp` and `linear` variants
//! are the ablations compared against the sink-attention form.

mod backward;
mod forward;
mod io;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use backward::gate_loss_and_grad;
pub use forward::{gate_forward, sink_attention_score, softplus};
pub use io::{GateFileHeader, GateSet, Provenance, GATE_MAGIC};

use crate::error::{Error, Result};

const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GateVariant {
    #[default]
    SinkAttention,
    /// Sink terms and bias removed: the per-member fraction becomes `sigmoid(q.k)`.
    NoDenominator,
    /// Two-layer SwiGLU MLP with a sigmoid head, width matched to the sink gate.
    Mlp,
    /// `sigmoid(W x + bias)`.
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GateConfig {
    pub d_model: usize,
    pub n_kv_heads: usize,
    pub group_size: usize,
    /// Low-rank projection width D'.
    pub d_low: usize,
    /// Number of learnable sink keys S.
    pub n_sinks: usize,
    pub variant: GateVariant,
    pub norm_eps: f64,
    /// One normalization scale vector shared by all heads (and group members)
    /// instead of one per head slot.
    pub shared_norm: bool,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_kv_heads: 2,
            group_size: 2,
            d_low: 16,
            n_sinks: 16,
            variant: GateVariant::SinkAttention,
            norm_eps: 1e-6,
            shared_norm: true,
        }
    }
}

impl GateConfig {
    /// Copies the attention geometry (`d_model`, `n_kv_heads`, `group_size`)
    /// from a model config.
    pub fn for_model(mut self, model: &crate::model::ModelConfig) -> Self {
        self.d_model = model.d_model;
        self.n_kv_heads = model.n_kv_heads;
        self.group_size = model.group_size;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_kv_heads == 0 || self.group_size == 0 || self.d_low == 0 {
            return Err(Error::Config(
                "gate dimensions d_model, n_kv_heads, group_size, d_low must be >= 1".into(),
            ));
        }
        if !(self.norm_eps > 0.0) {
            return Err(Error::Config("gate norm_eps must be positive".into()));
        }
        Ok(())
    }

    /// Upper bound on the sink-attention parameter count.
    pub fn sink_param_bound(&self) -> usize {
        let (d, h, g, dl) = (self.d_model, self.n_kv_heads, self.group_size, self.d_low);
        2 * (g + 1) * h * dl * d + self.n_sinks * h * dl + 2 * dl + g * h
    }

    /// Exact parameter count of the sink-attention form of this config.
    pub fn sink_param_count(&self) -> usize {
        let (d, h, g, dl) = (self.d_model, self.n_kv_heads, self.group_size, self.d_low);
        let gammas = if self.shared_norm { 2 * dl } else { (1 + g) * h * dl };
        (1 + g) * h * dl * d + gammas + self.n_sinks * h * dl + g * h
    }

    /// Hidden width of the MLP variant: the one whose total parameter count
    /// (`2*F*D + H*F + H`) is closest to the sink-attention gate's.
    pub fn mlp_width(&self) -> usize {
        let target = self.sink_param_count() as f64;
        let per_unit = (2 * self.d_model + self.n_kv_heads) as f64;
        (((target - self.n_kv_heads as f64) / per_unit).round() as usize).max(1)
    }

    fn gamma_rows(&self, slots: usize) -> Vec<usize> {
        if self.shared_norm {
            vec![self.d_low]
        } else {
            vec![slots, self.d_low]
        }
    }

    /// Names and shapes of this variant's tensors, in storage order.
    pub fn layout(&self) -> Vec<(&'static str, Vec<usize>)> {
        let (d, h, g, dl) = (self.d_model, self.n_kv_heads, self.group_size, self.d_low);
        match self.variant {
            GateVariant::SinkAttention => vec![
                ("w_k", vec![h * dl, d]),
                ("w_q", vec![g * h * dl, d]),
                ("gamma_k", self.gamma_rows(h)),
                ("gamma_q", self.gamma_rows(g * h)),
                ("k_sink", vec![self.n_sinks, h, dl]),
                ("beta", vec![g, h]),
            ],
            GateVariant::NoDenominator => vec![
                ("w_k", vec![h * dl, d]),
                ("w_q", vec![g * h * dl, d]),
                ("gamma_k", self.gamma_rows(h)),
                ("gamma_q", self.gamma_rows(g * h)),
            ],
            GateVariant::Mlp => {
                let f = self.mlp_width();
                vec![
                    ("w_gate", vec![f, d]),
                    ("w_up", vec![f, d]),
                    ("w_down", vec![h, f]),
                    ("b_out", vec![h]),
                ]
            }
            GateVariant::Linear => vec![("w", vec![h, d]), ("bias", vec![h])],
        }
    }
}

/// One named parameter tensor. Values are held in f64 for the gradient path;
/// initialization and training keep them exactly representable in f32.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Parameters of one layer's gate.
#[derive(Debug, Clone, PartialEq)]
pub struct GateParams {
    pub config: GateConfig,
    pub tensors: Vec<ParamTensor>,
}

/// Gradients aligned with [`GateParams::tensors`].
pub type GateGrads = Vec<Vec<f64>>;

/// Draws gate parameters: projections, sinks and MLP weights from
/// `normal(0, 0.02)` (rounded to f32), normalization scales at one, `beta`
/// and biases at zero.
pub fn init_gate(config: &GateConfig, seed: u64) -> Result<GateParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    let tensors = config
        .layout()
        .into_iter()
        .map(|(name, shape)| {
            let n: usize = shape.iter().product();
            let data = match name {
                "gamma_k" | "gamma_q" => vec![1.0; n],
                "beta" | "b_out" | "bias" => vec![0.0; n],
                _ => (0..n)
                    .map(|_| f64::from(normal.sample(&mut rng) as f32))
                    .collect(),
            };
            ParamTensor {
                name: name.to_string(),
                shape,
                data,
            }
        })
        .collect();
    Ok(GateParams {
        config: config.clone(),
        tensors,
    })
}

impl GateParams {
    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn tensor(&self, name: &str) -> Option<&ParamTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut ParamTensor> {
        self.tensors.iter_mut().find(|t| t.name == name)
    }

    /// Head-level biases `b = softplus(beta)` (sink-attention variant only).
    pub fn biases(&self) -> Option<Vec<f64>> {
        self.tensor("beta")
            .map(|t| t.data.iter().map(|&b| softplus(b)).collect())
    }

    pub fn zero_grads(&self) -> GateGrads {
        self.tensors.iter().map(|t| vec![0.0; t.data.len()]).collect()
    }

    /// `theta <- theta - lr * grad`, with the result rounded to f32 storage.
    pub fn sgd_step(&mut self, grads: &GateGrads, lr: f64) {
        for (t, g) in self.tensors.iter_mut().zip(grads) {
            for (p, gi) in t.data.iter_mut().zip(g) {
                *p = f64::from((*p - lr * gi) as f32);
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    /// Little-endian f32 bytes of every tensor.
    pub fn to_f32_bytes(&self) -> Vec<u8> {
        self.tensors
            .iter()
            .flat_map(|t| t.data.iter().flat_map(|v| (*v as f32).to_le_bytes()))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic() {
        let cfg = GateConfig::default();
        assert_eq!(init_gate(&cfg, 3).unwrap(), init_gate(&cfg, 3).unwrap());
        assert_ne!(init_gate(&cfg, 3).unwrap(), init_gate(&cfg, 4).unwrap());
    }

    #[test]
    fn biases_start_at_ln2() {
        let p = init_gate(&GateConfig::default(), 1).unwrap();
        let b = p.biases().unwrap();
        assert_eq!(b.len(), 4);
        for v in b {
            assert!((v - std::f64::consts::LN_2).abs() < 1e-15);
        }
    }

    #[test]
    fn linear_variant_param_count() {
        let cfg = GateConfig {
            variant: GateVariant::Linear,
            ..GateConfig::default()
        };
        let p = init_gate(&cfg, 0).unwrap();
        assert_eq!(p.param_count(), cfg.n_kv_heads * cfg.d_model + cfg.n_kv_heads);
    }

    #[test]
    fn sink_param_count_matches_layout_and_bound() {
        for shared_norm in [true, false] {
            let cfg = GateConfig {
                shared_norm,
                ..GateConfig::default()
            };
            let p = init_gate(&cfg, 0).unwrap();
            assert_eq!(p.param_count(), cfg.sink_param_count());
            assert!(p.param_count() <= cfg.sink_param_bound());
        }
    }

    #[test]
    fn mlp_variant_matches_sink_size_within_two_percent() {
        let base = GateConfig::default();
        let mlp = GateConfig {
            variant: GateVariant::Mlp,
            ..base.clone()
        };
        let a = init_gate(&base, 0).unwrap().param_count() as f64;
        let b = init_gate(&mlp, 0).unwrap().param_count() as f64;
        assert!(((a - b) / a).abs() < 0.02, "sink {a} vs mlp {b}");
    }

    #[test]
    fn init_values_are_f32_exact() {
        let p = init_gate(&GateConfig::default(), 9).unwrap();
        for t in &p.tensors {
            for v in &t.data {
                assert_eq!(f64::from(*v as f32), *v);
            }
        }
    }

    #[test]
    fn zero_width_rejected() {
        let cfg = GateConfig {
            d_low: 0,
            ..GateConfig::default()
        };
        assert!(init_gate(&cfg, 0).is_err());
    }
}
