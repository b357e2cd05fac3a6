use std::time::Instant;

use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::evict::{evict, EvictionRequest, Phase};
use super::policy::EvictionPolicy;
use super::prefill::score_new_entries;
use super::scorer::KvScorer;
use super::stats::EngineStats;
use crate::error::{Error, Result};
use crate::metrics::argmax;
use crate::model::{Capture, KvCache, Transformer};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Sampler {
    #[default]
    Greedy,
    Categorical { seed: u64, temperature: f64 },
}

struct SamplerState {
    kind: Sampler,
    rng: ChaCha8Rng,
}

impl SamplerState {
    fn new(kind: Sampler) -> Self {
        let seed = match kind {
            Sampler::Categorical { seed, .. } => seed,
            Sampler::Greedy => 0,
        };
        Self {
            kind,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn next(&mut self, logits: &[f32]) -> Result<u32> {
        match self.kind {
            Sampler::Greedy => Ok(argmax(logits) as u32),
            Sampler::Categorical { temperature, .. } => {
                if !(temperature > 0.0) {
                    return Err(Error::Config("sampling temperature must be positive".into()));
                }
                let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
                let w: Vec<f64> = logits
                    .iter()
                    .map(|&l| ((l as f64 - max) / temperature).exp())
                    .collect();
                let dist = WeightedIndex::new(&w).map_err(|e| Error::Numeric(e.to_string()))?;
                Ok(dist.sample(&mut self.rng) as u32)
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct DecodeOutput {
    pub tokens: Vec<u32>,
    /// Logits produced after feeding each generated token.
    pub step_logits: Vec<Vec<f32>>,
    pub stats: EngineStats,
}

/// Hidden states waiting to be gated, per layer.
struct DecodeBuffer {
    hidden: Vec<Vec<f32>>,
    positions: Vec<usize>,
}

impl DecodeBuffer {
    fn new(n_layers: usize) -> Self {
        Self {
            hidden: vec![Vec::new(); n_layers],
            positions: Vec::new(),
        }
    }

    fn len(&self) -> usize {
        self.positions.len()
    }

    fn clear(&mut self) {
        self.hidden.iter_mut().for_each(Vec::clear);
        self.positions.clear();
    }
}

/// Gates every buffered state in one batch and evicts back to budget.
fn flush(
    scorer: &dyn KvScorer,
    cache: &mut KvCache,
    buffer: &mut DecodeBuffer,
    policy: &EvictionPolicy,
    stats: &mut EngineStats,
) -> Result<()> {
    let t0 = Instant::now();
    score_new_entries(scorer, cache, &buffer.hidden, &buffer.positions)?;
    stats.gating_seconds += t0.elapsed().as_secs_f64();
    stats.gating_events += 1;
    buffer.clear();
    let req = EvictionRequest {
        phase: Phase::Decode,
        total_tokens: cache.seen_tokens(),
        window: policy.decode_window,
        allow_unscored: true,
    };
    stats.events.push(evict(cache, policy, &req)?);
    Ok(())
}

/// Where the next decoded token comes from.
enum Feed<'a> {
    Sample(SamplerState),
    Forced(&'a [u32]),
}

fn gated_loop(
    model: &Transformer,
    scorer: &dyn KvScorer,
    cache: &mut KvCache,
    prompt_logits: &[f32],
    n_steps: usize,
    policy: &EvictionPolicy,
    mut feed: Feed<'_>,
) -> Result<DecodeOutput> {
    policy.validate()?;
    policy.check_decode_capacity(model.config.n_kv_heads)?;
    let mut stats = EngineStats::new(model.config.n_layers);
    let mut buffer = DecodeBuffer::new(model.config.n_layers);
    let mut tokens = Vec::with_capacity(n_steps);
    let mut step_logits: Vec<Vec<f32>> = Vec::with_capacity(n_steps);
    for step in 0..n_steps {
        let next = match &mut feed {
            Feed::Sample(s) => s.next(step_logits.last().map_or(prompt_logits, Vec::as_slice))?,
            Feed::Forced(toks) => toks[step],
        };
        tokens.push(next);
        let t0 = Instant::now();
        let out = model.forward(&[next], cache, Capture::HIDDEN)?;
        stats.forward_seconds += t0.elapsed().as_secs_f64();
        stats.observe_peak(cache);
        for (b, h) in buffer.hidden.iter_mut().zip(&out.hidden) {
            b.extend_from_slice(h);
        }
        buffer.positions.extend(&out.positions);
        if buffer.len() == policy.decode_buffer {
            flush(scorer, cache, &mut buffer, policy, &mut stats)?;
        }
        step_logits.push(out.logits);
    }
    if buffer.len() > 0 {
        flush(scorer, cache, &mut buffer, policy, &mut stats)?;
    }
    stats.finish(cache);
    Ok(DecodeOutput {
        tokens,
        step_logits,
        stats,
    })
}

/// Generates `n_steps` tokens after a prefilled `cache`.
///
/// Each generated token is fed back with its KV entries left unscored and
/// its hidden states buffered. When `decode_buffer` states have accumulated,
/// and once more at the end, they are gated together and the cache is
/// evicted with the last `decode_window` positions exempt. Unscored entries
/// are never evicted.
pub fn decode_gated(
    model: &Transformer,
    scorer: &dyn KvScorer,
    cache: &mut KvCache,
    prompt_logits: &[f32],
    n_steps: usize,
    policy: &EvictionPolicy,
    sampler: Sampler,
) -> Result<DecodeOutput> {
    let feed = Feed::Sample(SamplerState::new(sampler));
    gated_loop(model, scorer, cache, prompt_logits, n_steps, policy, feed)
}

/// Same buffering and eviction as [`decode_gated`], but feeds the given
/// tokens instead of sampling.
pub fn decode_teacher_forced(
    model: &Transformer,
    scorer: &dyn KvScorer,
    cache: &mut KvCache,
    tokens: &[u32],
    policy: &EvictionPolicy,
) -> Result<DecodeOutput> {
    gated_loop(model, scorer, cache, &[], tokens.len(), policy, Feed::Forced(tokens))
}

/// Reference decoder over a cache that is never scored or evicted.
pub fn decode_uncompressed(
    model: &Transformer,
    cache: &mut KvCache,
    prompt_logits: &[f32],
    n_steps: usize,
    sampler: Sampler,
) -> Result<DecodeOutput> {
    let mut sampler = SamplerState::new(sampler);
    let mut stats = EngineStats::new(model.config.n_layers);
    let mut tokens = Vec::with_capacity(n_steps);
    let mut step_logits = Vec::with_capacity(n_steps);
    if n_steps > 0 {
        let mut next = sampler.next(prompt_logits)?;
        for _ in 0..n_steps {
            tokens.push(next);
            let t0 = Instant::now();
            let out = model.forward(&[next], cache, Capture::NONE)?;
            stats.forward_seconds += t0.elapsed().as_secs_f64();
            next = sampler.next(&out.logits)?;
            step_logits.push(out.logits);
        }
    }
    stats.finish(cache);
    Ok(DecodeOutput {
        tokens,
        step_logits,
        stats,
    })
}
