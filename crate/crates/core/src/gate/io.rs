//! `FKVZ` gate weight files: one gate per layer.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{forward::gate_forward, GateConfig, GateParams, GateVariant, ParamTensor};
use crate::error::{Error, Result};
use crate::format;
use crate::model::TensorSpec;

pub const GATE_MAGIC: &[u8; 4] = b"FKVZ";

/// Where a gate set came from.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub corpus_hash: Option<String>,
    pub model_seed: Option<u64>,
    pub trainer: Option<serde_json::Value>,
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateFileHeader {
    pub variant: GateVariant,
    pub seed: u64,
    pub layers: Vec<GateConfig>,
    pub tensors: Vec<Vec<TensorSpec>>,
    pub provenance: Provenance,
}

/// Gates for every layer of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct GateSet {
    pub seed: u64,
    pub layers: Vec<GateParams>,
    pub provenance: Provenance,
}

impl GateSet {
    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(GateParams::param_count).sum()
    }

    /// Scores `T x D` hidden states of `layer`, returning `T x H` f32 scores.
    pub fn score(&self, layer: usize, hiddens: &[f32]) -> Result<Vec<f32>> {
        let gate = self
            .layers
            .get(layer)
            .ok_or_else(|| Error::Shape(format!("no gate for layer {layer}")))?;
        Ok(gate_forward(hiddens, gate)?.into_iter().map(|v| v as f32).collect())
    }

    fn header(&self) -> Result<GateFileHeader> {
        let variant = self
            .layers
            .first()
            .map(|g| g.config.variant)
            .ok_or_else(|| Error::InvalidInput("gate set has no layers".into()))?;
        if self.layers.iter().any(|g| g.config.variant != variant) {
            return Err(Error::InvalidInput("mixed gate variants in one file".into()));
        }
        Ok(GateFileHeader {
            variant,
            seed: self.seed,
            layers: self.layers.iter().map(|g| g.config.clone()).collect(),
            tensors: self
                .layers
                .iter()
                .map(|g| {
                    g.tensors
                        .iter()
                        .map(|t| TensorSpec {
                            name: t.name.clone(),
                            shape: t.shape.clone(),
                        })
                        .collect()
                })
                .collect(),
            provenance: self.provenance.clone(),
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let payload: Vec<f32> = self
            .layers
            .iter()
            .flat_map(|g| g.tensors.iter().flat_map(|t| t.data.iter().map(|&v| v as f32)))
            .collect();
        format::encode_container(GATE_MAGIC, &self.header()?, &payload)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, payload): (GateFileHeader, Vec<f32>) =
            format::decode_container(GATE_MAGIC, bytes)?;
        if header.layers.len() != header.tensors.len() {
            return Err(Error::Format("FKVZ layer and tensor tables disagree".into()));
        }
        let mut offset = 0;
        let mut layers = Vec::with_capacity(header.layers.len());
        for (cfg, specs) in header.layers.iter().zip(&header.tensors) {
            cfg.validate()?;
            if cfg.variant != header.variant {
                return Err(Error::Format("FKVZ layer variant differs from header".into()));
            }
            let expected: Vec<(String, Vec<usize>)> = cfg
                .layout()
                .into_iter()
                .map(|(n, s)| (n.to_string(), s))
                .collect();
            let declared: Vec<(String, Vec<usize>)> =
                specs.iter().map(|s| (s.name.clone(), s.shape.clone())).collect();
            if expected != declared {
                return Err(Error::Format("FKVZ tensor table does not match gate config".into()));
            }
            let mut tensors = Vec::with_capacity(specs.len());
            for spec in specs {
                let n = spec.numel();
                let data = payload
                    .get(offset..offset + n)
                    .ok_or_else(|| Error::Format("FKVZ payload truncated".into()))?
                    .iter()
                    .map(|&v| f64::from(v))
                    .collect();
                offset += n;
                tensors.push(ParamTensor {
                    name: spec.name.clone(),
                    shape: spec.shape.clone(),
                    data,
                });
            }
            layers.push(GateParams {
                config: cfg.clone(),
                tensors,
            });
        }
        if offset != payload.len() {
            return Err(Error::Format(format!(
                "FKVZ payload has {} trailing floats",
                payload.len() - offset
            )));
        }
        Ok(Self {
            seed: header.seed,
            layers,
            provenance: header.provenance,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        format::write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&format::read_file(path)?)
    }
}
