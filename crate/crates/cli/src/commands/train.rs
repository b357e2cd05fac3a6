//! Corpus → shards → per-layer gate training → `FKVZ` file.

use std::time::Instant;

use fastkv_core::gate::{GateSet, Provenance};
use fastkv_core::trainer::{prepare_shards, shard_path, train_gates, TrainReport};
use serde::Serialize;

use crate::common::{load_model, write_json};
use crate::config::RunConfig;
use crate::error::CliError;

#[derive(Debug, Clone, Serialize)]
pub struct TrainSummary {
    pub corpus_hash: String,
    pub n_contexts: usize,
    pub tuples_per_layer: usize,
    pub shard_seconds: f64,
    pub gate_params: usize,
    pub model_params: usize,
    pub gate_file: String,
    pub gate_file_bytes: usize,
    pub report: TrainReport,
}

pub fn run(cfg: &RunConfig) -> Result<(GateSet, TrainSummary), CliError> {
    cfg.validate()?;
    let seeds = cfg.seeds();
    let model = load_model(cfg)?;
    let dir = &cfg.output.dir;
    if cfg.checkpoint.is_none() {
        model.save(&dir.join("model.fkvm"))?;
    }

    let t0 = Instant::now();
    let shards = prepare_shards(&model, &cfg.corpus, &cfg.targets, seeds.corpus)?;
    let shard_seconds = t0.elapsed().as_secs_f64();
    let corpus_hash = shards[0].provenance.corpus_hash.clone();
    eprintln!(
        "built {} shards: {} contexts, {} tuples per layer in {shard_seconds:.1}s",
        shards.len(),
        shards[0].counts.len(),
        shards[0].len()
    );
    if cfg.output.write_shards {
        for s in &shards {
            s.save(&shard_path(&dir.join("shards"), s.layer))?;
        }
    }

    let trainer = cfg.trainer_config();
    let provenance = Provenance {
        corpus_hash: Some(corpus_hash.clone()),
        model_seed: Some(model.seed),
        trainer: Some(serde_json::to_value(&trainer)?),
        note: None,
    };
    let (gates, report) = train_gates(&shards, &cfg.gate_config(), &trainer, provenance)?;
    for l in &report.layers {
        eprintln!(
            "layer {}: train BCE {:.4} -> {:.4}, val BCE {} -> {}",
            l.layer,
            l.initial_train_loss,
            l.final_train_loss,
            fmt_opt(l.initial_val_loss),
            fmt_opt(l.final_val_loss)
        );
    }
    let gate_path = cfg.gate_path();
    let bytes = gates.to_bytes()?;
    fastkv_core::format::write_atomic(&gate_path, &bytes)?;
    let summary = TrainSummary {
        corpus_hash,
        n_contexts: shards[0].counts.len(),
        tuples_per_layer: shards[0].len(),
        shard_seconds,
        gate_params: gates.param_count(),
        model_params: model.config.total_params(),
        gate_file: gate_path.display().to_string(),
        gate_file_bytes: bytes.len(),
        report,
    };
    write_json(&dir.join("train_report.json"), &summary)?;
    Ok((gates, summary))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |v| format!("{v:.4}"))
}
