//! Per-layer, per-KV-head key/value storage.
//!
//! The same structure serves as the full cache (no entry ever removed, no
//! scores) and as the compressed cache driven by the eviction engine, where
//! entries carry an optional importance score and heads may hold different
//! position sets.

use serde::Serialize;

/// Entries of one KV head, ordered by strictly increasing position.
/// Keys are stored after the rotary embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadCache {
    d_head: usize,
    positions: Vec<usize>,
    keys: Vec<f32>,
    values: Vec<f32>,
    scores: Vec<Option<f32>>,
}

impl HeadCache {
    pub fn new(d_head: usize) -> Self {
        Self {
            d_head,
            positions: Vec::new(),
            keys: Vec::new(),
            values: Vec::new(),
            scores: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    pub fn scores(&self) -> &[Option<f32>] {
        &self.scores
    }

    pub fn key(&self, i: usize) -> &[f32] {
        &self.keys[i * self.d_head..(i + 1) * self.d_head]
    }

    pub fn value(&self, i: usize) -> &[f32] {
        &self.values[i * self.d_head..(i + 1) * self.d_head]
    }

    /// Number of leading entries with position `<= position`.
    pub fn visible_upto(&self, position: usize) -> usize {
        self.positions.partition_point(|&p| p <= position)
    }

    pub(crate) fn push(&mut self, position: usize, key: &[f32], value: &[f32]) {
        debug_assert!(self.positions.last().is_none_or(|&p| p < position));
        debug_assert_eq!(key.len(), self.d_head);
        self.positions.push(position);
        self.keys.extend_from_slice(key);
        self.values.extend_from_slice(value);
        self.scores.push(None);
    }

    /// Sets the score of the entry at `position`; returns false when that
    /// position is not cached.
    pub fn set_score(&mut self, position: usize, score: f32) -> bool {
        match self.positions.binary_search(&position) {
            Ok(i) => {
                self.scores[i] = Some(score);
                true
            }
            Err(_) => false,
        }
    }

    /// Keeps entries whose flag is true, preserving order.
    pub fn retain_mask(&mut self, keep: &[bool]) {
        assert_eq!(keep.len(), self.len());
        let d = self.d_head;
        let mut w = 0;
        for r in 0..keep.len() {
            if !keep[r] {
                continue;
            }
            if w != r {
                self.positions[w] = self.positions[r];
                self.scores[w] = self.scores[r];
                self.keys.copy_within(r * d..(r + 1) * d, w * d);
                self.values.copy_within(r * d..(r + 1) * d, w * d);
            }
            w += 1;
        }
        self.positions.truncate(w);
        self.scores.truncate(w);
        self.keys.truncate(w * d);
        self.values.truncate(w * d);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerCache {
    pub heads: Vec<HeadCache>,
}

impl LayerCache {
    pub fn len(&self) -> usize {
        self.heads.iter().map(HeadCache::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Key/value cache for every layer of one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct KvCache {
    pub layers: Vec<LayerCache>,
    seen_tokens: usize,
}

/// The eviction engine's view of the cache: entries may be scored and heads
/// may diverge in length.
pub type CompressedKvCache = KvCache;

/// Entry counts, for reports.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct CacheShape {
    pub per_head: Vec<Vec<usize>>,
}

impl KvCache {
    pub fn new(n_layers: usize, n_kv_heads: usize, d_head: usize) -> Self {
        Self {
            layers: (0..n_layers)
                .map(|_| LayerCache {
                    heads: (0..n_kv_heads).map(|_| HeadCache::new(d_head)).collect(),
                })
                .collect(),
            seen_tokens: 0,
        }
    }

    /// Number of tokens ever appended; the next token takes this position.
    pub fn seen_tokens(&self) -> usize {
        self.seen_tokens
    }

    pub(crate) fn advance(&mut self, n: usize) {
        self.seen_tokens += n;
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn total_entries(&self) -> usize {
        self.layers.iter().map(LayerCache::len).sum()
    }

    pub fn layer_entries(&self) -> Vec<usize> {
        self.layers.iter().map(LayerCache::len).collect()
    }

    pub fn shape(&self) -> CacheShape {
        CacheShape {
            per_head: self
                .layers
                .iter()
                .map(|l| l.heads.iter().map(HeadCache::len).collect())
                .collect(),
        }
    }
}
