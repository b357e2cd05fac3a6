use std::time::Instant;

use super::evict::{evict, EvictionRequest, Phase};
use super::policy::EvictionPolicy;
use super::scorer::KvScorer;
use super::stats::EngineStats;
use crate::error::{Error, Result};
use crate::model::{Capture, KvCache, Transformer};

#[derive(Debug, Clone)]
pub struct PrefillOutput {
    pub cache: KvCache,
    /// Logits of the last prompt token.
    pub last_logits: Vec<f32>,
    pub stats: EngineStats,
}

/// Scores the entries just appended at `positions` for every layer.
pub(crate) fn score_new_entries(
    scorer: &dyn KvScorer,
    cache: &mut KvCache,
    hidden: &[Vec<f32>],
    positions: &[usize],
) -> Result<()> {
    for (l, layer_hidden) in hidden.iter().enumerate() {
        let scores = scorer.score(l, layer_hidden, positions)?;
        let n_heads = cache.layers[l].heads.len();
        if scores.len() != positions.len() * n_heads {
            return Err(Error::Shape(format!(
                "scorer returned {} values for {} positions x {n_heads} heads",
                scores.len(),
                positions.len()
            )));
        }
        if let Some(bad) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
            return Err(Error::Numeric(format!("score {bad} outside [0, 1]")));
        }
        for (i, &pos) in positions.iter().enumerate() {
            for (h, head) in cache.layers[l].heads.iter_mut().enumerate() {
                head.set_score(pos, scores[i * n_heads + h]);
            }
        }
    }
    Ok(())
}

/// Chunked prefill with gated eviction after every chunk.
///
/// Each chunk runs against the compressed cache, its hidden states are scored
/// and the cache is evicted back to budget with the most recent `window`
/// tokens exempt. The window is `prefill_window`, or
/// `ceil(short_context_window_fraction * T)` when the input is shorter than
/// one chunk.
pub fn prefill_chunked(
    model: &Transformer,
    scorer: &dyn KvScorer,
    tokens: &[u32],
    policy: &EvictionPolicy,
) -> Result<PrefillOutput> {
    policy.validate()?;
    if tokens.is_empty() {
        return Err(Error::InvalidInput("prefill needs at least one token".into()));
    }
    let cfg = &model.config;
    let window = policy.prefill_window_for(tokens.len());
    let mut cache = model.empty_cache();
    let mut stats = EngineStats::new(cfg.n_layers);
    let mut last_logits = Vec::new();

    for chunk in tokens.chunks(policy.chunk_size) {
        let t0 = Instant::now();
        let out = model.forward(chunk, &mut cache, Capture::HIDDEN)?;
        stats.forward_seconds += t0.elapsed().as_secs_f64();
        stats.observe_peak(&cache);

        let t1 = Instant::now();
        score_new_entries(scorer, &mut cache, &out.hidden, &out.positions)?;
        stats.gating_seconds += t1.elapsed().as_secs_f64();
        stats.gating_events += 1;

        let req = EvictionRequest {
            phase: Phase::Prefill,
            total_tokens: cache.seen_tokens(),
            window,
            allow_unscored: false,
        };
        stats.events.push(evict(&mut cache, policy, &req)?);
        let v = cfg.vocab_size;
        last_logits = out.logits[(chunk.len() - 1) * v..].to_vec();
    }
    stats.finish(&cache);
    Ok(PrefillOutput {
        cache,
        last_logits,
        stats,
    })
}
