//! Summaries of artifact files and of a run's resolved configuration.

use std::path::Path;

use fastkv_core::format::{peek_header, read_file};
use fastkv_core::gate::{GateSet, GATE_MAGIC};
use fastkv_core::model::{Transformer, MODEL_MAGIC};
use fastkv_core::trainer::{Shard, SHARD_MAGIC};
use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::error::CliError;

/// Describes one `FKVM`, `FKVZ` or `FKVT` file. The file is fully decoded, so
/// corrupt payloads are reported as errors.
pub fn describe_file(path: &Path) -> Result<Value, CliError> {
    let bytes = read_file(path)?;
    let (magic, version, _) = peek_header(&bytes)?;
    let base = json!({
        "path": path.display().to_string(),
        "bytes": bytes.len(),
        "magic": String::from_utf8_lossy(&magic),
        "version": version,
    });
    let detail = if &magic == GATE_MAGIC {
        let g = GateSet::from_bytes(&bytes)?;
        json!({
            "kind": "gates",
            "variant": g.layers.first().map(|l| l.config.variant),
            "layers": g.n_layers(),
            "params": g.param_count(),
            "seed": g.seed,
            "provenance": g.provenance,
        })
    } else if &magic == MODEL_MAGIC {
        let m = Transformer::from_checkpoint_bytes(&bytes)?;
        json!({
            "kind": "model",
            "seed": m.seed,
            "params": m.config.total_params(),
            "config": m.config,
        })
    } else if &magic == SHARD_MAGIC {
        let s = Shard::from_bytes(&bytes)?;
        json!({
            "kind": "shard",
            "layer": s.layer,
            "contexts": s.counts.len(),
            "tuples": s.len(),
            "d_model": s.d_model,
            "n_kv_heads": s.n_heads,
            "mean_target": s.targets.iter().map(|&v| f64::from(v)).sum::<f64>() / s.targets.len().max(1) as f64,
            "provenance": s.provenance,
        })
    } else {
        return Err(CliError::Data(format!(
            "{}: unknown magic {:?}",
            path.display(),
            String::from_utf8_lossy(&magic)
        )));
    };
    let mut out = base;
    if let (Value::Object(o), Value::Object(d)) = (&mut out, detail) {
        o.extend(d);
    }
    Ok(out)
}

/// Resolved config, effective seeds and every artifact found in the output
/// directory.
pub fn describe_run(cfg: &RunConfig) -> Result<Value, CliError> {
    let dir = &cfg.output.dir;
    let mut paths = vec![dir.join("model.fkvm"), cfg.gate_path()];
    let shard_dir = dir.join("shards");
    if let Ok(entries) = std::fs::read_dir(&shard_dir) {
        let mut shards: Vec<_> = entries.filter_map(|e| e.ok().map(|e| e.path())).collect();
        shards.sort();
        paths.extend(shards);
    }
    let artifacts = paths
        .iter()
        .filter(|p| p.is_file())
        .map(|p| describe_file(p))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(json!({
        "config": cfg,
        "seeds": cfg.seeds(),
        "gate_params": cfg.gate_config().sink_param_count(),
        "model_params": cfg.model.total_params(),
        "artifacts": artifacts,
    }))
}
