use std::path::Path;

use fastkv_core::format::write_atomic;
use fastkv_core::model::{init_model, Transformer};
use fastkv_core::trainer::{sample_sequences, Corpus, CorpusSpec};

use crate::config::RunConfig;
use crate::error::CliError;

/// The frozen model: from the checkpoint when configured, else freshly
/// initialized from `[model]` and the model seed.
pub fn load_model(cfg: &RunConfig) -> Result<Transformer, CliError> {
    match &cfg.checkpoint {
        Some(path) => Ok(Transformer::load(path)?),
        None => Ok(init_model(&cfg.model, cfg.seeds().model)?),
    }
}

/// `n` contexts of exactly `len` tokens drawn from the given sources.
pub fn sample_fixed_contexts(
    sources: &[std::path::PathBuf],
    n: usize,
    len: usize,
    seed: u64,
) -> Result<Vec<Vec<u32>>, CliError> {
    let corpus = Corpus::load(sources)?;
    let stream = corpus.token_stream();
    if stream.len() < len {
        return Err(CliError::Data(format!(
            "corpus has {} tokens, need contexts of {len}",
            stream.len()
        )));
    }
    let spec = CorpusSpec {
        sources: sources.to_vec(),
        min_seq_tokens: len,
        max_seq_tokens: len,
        total_tokens: n * len,
        ..CorpusSpec::default()
    };
    Ok(sample_sequences(&stream, &spec, seed)?)
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())?;
    Ok(())
}

pub fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    write_atomic(path, text.as_bytes())?;
    Ok(())
}

/// Errors unless `gates` has one layer per model layer with matching widths.
pub fn check_gates(model: &Transformer, gates: &fastkv_core::gate::GateSet) -> Result<(), CliError> {
    let m = &model.config;
    if gates.n_layers() != m.n_layers {
        return Err(CliError::Data(format!(
            "gate file has {} layers, model has {}",
            gates.n_layers(),
            m.n_layers
        )));
    }
    for (l, g) in gates.layers.iter().enumerate() {
        let c = &g.config;
        if c.d_model != m.d_model || c.n_kv_heads != m.n_kv_heads || c.group_size != m.group_size {
            return Err(CliError::Data(format!(
                "gate layer {l} expects d_model {} / {} KV heads / group {}, model has {} / {} / {}",
                c.d_model, c.n_kv_heads, c.group_size, m.d_model, m.n_kv_heads, m.group_size
            )));
        }
    }
    Ok(())
}
