use serde::Serialize;

use super::evict::EvictionEvent;
use crate::model::KvCache;

/// Counters and the eviction log of one engine run.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct EngineStats {
    pub total_tokens: usize,
    /// Largest per-layer entry count observed (sampled after each append).
    pub peak_layer_entries: Vec<usize>,
    pub final_layer_entries: Vec<usize>,
    /// Final entries per head divided by tokens seen, per `(layer, head)`.
    pub retained_ratio: Vec<Vec<f64>>,
    pub gating_events: usize,
    pub gating_seconds: f64,
    pub forward_seconds: f64,
    pub events: Vec<EvictionEvent>,
}

impl EngineStats {
    pub fn new(n_layers: usize) -> Self {
        Self {
            total_tokens: 0,
            peak_layer_entries: vec![0; n_layers],
            final_layer_entries: vec![0; n_layers],
            retained_ratio: Vec::new(),
            gating_events: 0,
            gating_seconds: 0.0,
            forward_seconds: 0.0,
            events: Vec::new(),
        }
    }

    pub fn observe_peak(&mut self, cache: &KvCache) {
        for (p, n) in self.peak_layer_entries.iter_mut().zip(cache.layer_entries()) {
            *p = (*p).max(n);
        }
    }

    pub fn peak_total(&self) -> usize {
        self.peak_layer_entries.iter().sum()
    }

    pub(crate) fn finish(&mut self, cache: &KvCache) {
        self.total_tokens = cache.seen_tokens();
        self.observe_peak(cache);
        self.final_layer_entries = cache.layer_entries();
        let seen = cache.seen_tokens().max(1) as f64;
        self.retained_ratio = cache
            .layers
            .iter()
            .map(|l| l.heads.iter().map(|h| h.len() as f64 / seen).collect())
            .collect();
    }

    /// Fraction of forward time spent in gating.
    pub fn gating_overhead(&self) -> f64 {
        if self.forward_seconds > 0.0 {
            self.gating_seconds / self.forward_seconds
        } else {
            0.0
        }
    }
}
