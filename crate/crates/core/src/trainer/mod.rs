//! Offline gate training: corpus sampling, shard building and per-layer SGD
//! on the binary cross-entropy between gate scores and oracle targets.

pub mod corpus;
pub mod shard;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::gate::{gate_forward, gate_loss_and_grad, init_gate, GateConfig, GateParams, GateSet, Provenance};
use crate::metrics::bce_loss;
use crate::model::Transformer;
use crate::targets::TargetConfig;

pub use corpus::{sample_sequences, synthetic_text, write_synthetic_corpus, Corpus, CorpusSpec, LongConcat};
pub use shard::{build_shards, shard_path, Shard, ShardProvenance, SHARD_MAGIC};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerConfig {
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    /// Seeds gate initialization and the train/validation split.
    pub seed: u64,
    /// Seeds minibatch sampling; defaults to `seed`.
    pub batch_seed: Option<u64>,
    pub val_fraction: f64,
    pub log_every: usize,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.2,
            steps: 500,
            batch_size: 64,
            seed: 0,
            batch_seed: None,
            val_fraction: 0.1,
            log_every: 50,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be finite and >= 0".into()));
        }
        if self.batch_size == 0 || self.log_every == 0 {
            return Err(Error::Config("batch_size and log_every must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config("val_fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Loss trajectory and summary of one layer's training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub layer: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub logged_steps: Vec<usize>,
    /// Mean minibatch loss since the previous log point.
    pub train_loss: Vec<f64>,
    /// Full validation-split loss at each log point.
    pub val_loss: Vec<f64>,
    pub initial_train_loss: f64,
    pub final_train_loss: f64,
    pub initial_val_loss: Option<f64>,
    pub final_val_loss: Option<f64>,
    /// Tuples seen divided by training-split size.
    pub epochs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub trainer: TrainerConfig,
    pub gate: GateConfig,
    pub layers: Vec<LayerReport>,
    /// SHA-256 of the trained parameters as f32 bytes, layer by layer.
    pub params_sha256: String,
    pub wall_seconds: f64,
}

/// Mixes a base seed with a layer index and a purpose tag.
pub fn derive_seed(base: u64, layer: usize, salt: u64) -> u64 {
    let mut z = base
        .wrapping_add((layer as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(salt.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const SALT_INIT: u64 = 1;
const SALT_SPLIT: u64 = 2;
const SALT_BATCH: u64 = 3;

/// Seeded split of `0..n` into (train, validation) row indices.
pub fn split_rows(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rows: Vec<usize> = (0..n).collect();
    rows.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut n_val = (val_fraction * n as f64).round() as usize;
    if val_fraction > 0.0 && n >= 2 {
        n_val = n_val.clamp(1, n - 1);
    }
    let train = rows.split_off(n_val);
    (train, rows)
}

/// The (train, validation) rows `train_layer` uses for a shard of `n` tuples.
pub fn layer_split(n: usize, layer: usize, cfg: &TrainerConfig) -> (Vec<usize>, Vec<usize>) {
    split_rows(n, cfg.val_fraction, derive_seed(cfg.seed, layer, SALT_SPLIT))
}

/// Mean BCE of the gate over the given shard rows.
pub fn shard_loss(params: &GateParams, shard: &Shard, rows: &[usize]) -> Result<f64> {
    let (h, t) = shard.gather(rows);
    let pred = gate_forward(&h, params)?;
    let target: Vec<f64> = t.iter().map(|&v| f64::from(v)).collect();
    bce_loss(&pred, &target)
}

/// Trains one layer's gate with plain SGD. Minibatches are drawn uniformly
/// with replacement from the training split.
pub fn train_layer(shard: &Shard, gate: &GateConfig, cfg: &TrainerConfig) -> Result<(GateParams, LayerReport)> {
    cfg.validate()?;
    gate.validate()?;
    if shard.d_model != gate.d_model || shard.n_heads != gate.n_kv_heads {
        return Err(Error::Shape(format!(
            "shard for layer {} has d_model {} and {} heads, gate expects {} and {}",
            shard.layer, shard.d_model, shard.n_heads, gate.d_model, gate.n_kv_heads
        )));
    }
    if shard.is_empty() {
        return Err(Error::Data(format!("shard for layer {} has no tuples", shard.layer)));
    }
    let layer = shard.layer;
    let (train, val) = layer_split(shard.len(), layer, cfg);
    let mut params = init_gate(gate, derive_seed(cfg.seed, layer, SALT_INIT))?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.batch_seed.unwrap_or(cfg.seed), layer, SALT_BATCH));

    let val_loss = |p: &GateParams| -> Result<Option<f64>> {
        if val.is_empty() {
            Ok(None)
        } else {
            shard_loss(p, shard, &val).map(Some)
        }
    };
    let initial_train_loss = shard_loss(&params, shard, &train)?;
    let initial_val_loss = val_loss(&params)?;

    let mut logged_steps = Vec::new();
    let mut train_loss = Vec::new();
    let mut val_losses = Vec::new();
    let mut interval_sum = 0.0;
    let mut interval_n = 0usize;
    let mut batch = vec![0usize; cfg.batch_size];
    for step in 1..=cfg.steps {
        for b in batch.iter_mut() {
            *b = train[rng.random_range(0..train.len())];
        }
        let (h, t) = shard.gather(&batch);
        let (loss, grads) = gate_loss_and_grad(&params, &h, &t)?;
        if !loss.is_finite() || grads.iter().flatten().any(|g| !g.is_finite()) {
            return Err(Error::Numeric(format!("layer {layer}: non-finite loss or gradient at step {step}")));
        }
        params.sgd_step(&grads, cfg.learning_rate);
        if !params.is_finite() {
            return Err(Error::Numeric(format!("layer {layer}: parameters diverged at step {step}")));
        }
        interval_sum += loss;
        interval_n += 1;
        if step % cfg.log_every == 0 {
            logged_steps.push(step);
            train_loss.push(interval_sum / interval_n as f64);
            val_losses.push(val_loss(&params)?.unwrap_or(f64::NAN));
            interval_sum = 0.0;
            interval_n = 0;
        }
    }
    let report = LayerReport {
        layer,
        n_train: train.len(),
        n_val: val.len(),
        logged_steps,
        train_loss,
        val_loss: val_losses,
        initial_train_loss,
        final_train_loss: shard_loss(&params, shard, &train)?,
        initial_val_loss,
        final_val_loss: val_loss(&params)?,
        epochs: (cfg.steps * cfg.batch_size) as f64 / train.len() as f64,
    };
    Ok((params, report))
}

pub fn params_sha256(layers: &[GateParams]) -> String {
    let mut h = Sha256::new();
    for p in layers {
        h.update(p.to_f32_bytes());
    }
    corpus::hex(&h.finalize())
}

/// Trains all layers independently (in parallel). Each layer's seeds depend
/// only on the base seeds and the layer index, so results do not depend on
/// thread count or scheduling.
pub fn train_gates(
    shards: &[Shard],
    gate: &GateConfig,
    cfg: &TrainerConfig,
    provenance: Provenance,
) -> Result<(GateSet, TrainReport)> {
    let start = std::time::Instant::now();
    let results: Vec<(GateParams, LayerReport)> = shards
        .par_iter()
        .map(|s| train_layer(s, gate, cfg))
        .collect::<Result<_>>()?;
    let (layers, reports): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    let report = TrainReport {
        trainer: cfg.clone(),
        gate: gate.clone(),
        params_sha256: params_sha256(&layers),
        layers: reports,
        wall_seconds: start.elapsed().as_secs_f64(),
    };
    let set = GateSet {
        seed: cfg.seed,
        layers,
        provenance,
    };
    Ok((set, report))
}

/// Loads the corpus, samples contexts and builds per-layer shards.
pub fn prepare_shards(
    model: &Transformer,
    corpus: &CorpusSpec,
    targets: &TargetConfig,
    sample_seed: u64,
) -> Result<Vec<Shard>> {
    corpus.validate()?;
    let prompt = targets.prompt_tokens().len();
    let needed = 2 * corpus.longest_context() + prompt;
    if needed > model.config.max_position {
        return Err(Error::Config(format!(
            "reconstruction sequences need {needed} positions but max_position is {}",
            model.config.max_position
        )));
    }
    let docs = Corpus::load(&corpus.sources)?;
    let contexts = sample_sequences(&docs.token_stream(), corpus, sample_seed)?;
    let provenance = ShardProvenance {
        corpus_hash: docs.hash(),
        model_seed: model.seed,
        sample_seed,
        targets: targets.clone(),
    };
    build_shards(model, &contexts, targets, provenance)
}
