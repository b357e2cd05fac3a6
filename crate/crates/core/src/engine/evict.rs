//! One eviction event over a whole cache.
//!
//! Entries inside the local window, and entries not yet scored when the
//! caller allows them (buffered decoding), are exempt: always kept, but
//! counted against the budget. The remaining budget of each pool goes to its
//! highest-scored entries via [`select_retained`].

use serde::Serialize;

use super::policy::{round_half_up, Allocation, BudgetMode, EvictionPolicy, PoolScope};
use super::select::{select_retained, Candidate, EntryId};
use crate::error::{Error, Result};
use crate::model::KvCache;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Prefill,
    Decode,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvictionRequest {
    pub phase: Phase,
    /// Tokens processed so far (the uncompressed cache size per head).
    pub total_tokens: usize,
    /// Number of most recent positions exempt from eviction.
    pub window: usize,
    /// Treat unscored entries as exempt instead of rejecting them.
    pub allow_unscored: bool,
}

impl EvictionRequest {
    pub fn window_start(&self) -> usize {
        self.total_tokens.saturating_sub(self.window)
    }
}

/// The set of `(layer, head)` slots sharing one budget.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PoolOutcome {
    pub slots: Vec<(usize, usize)>,
    pub budget: usize,
    pub exempt: usize,
    pub before: usize,
    pub after: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvictionEvent {
    pub phase: Phase,
    pub total_tokens: usize,
    pub window_start: usize,
    pub pools: Vec<PoolOutcome>,
    pub before: Vec<Vec<usize>>,
    pub after: Vec<Vec<usize>>,
}

impl EvictionEvent {
    pub fn evicted(&self) -> usize {
        self.pools.iter().map(|p| p.before - p.after).sum()
    }
}

/// Pools and their budgets for the given cache shape.
pub fn plan_pools(
    policy: &EvictionPolicy,
    n_layers: usize,
    n_heads: usize,
    total_tokens: usize,
) -> Vec<(Vec<(usize, usize)>, usize)> {
    let per_head = |l| (0..n_heads).map(move |h| (l, h));
    match (policy.budget, policy.allocation) {
        (BudgetMode::Ratio(r), Allocation::Uniform) => {
            let b = round_half_up(r * total_tokens as f64);
            (0..n_layers).flat_map(per_head).map(|s| (vec![s], b)).collect()
        }
        (BudgetMode::Ratio(r), Allocation::Nonuniform) => match policy.nonuniform_scope {
            PoolScope::PerLayer => {
                let b = round_half_up(r * (total_tokens * n_heads) as f64);
                (0..n_layers).map(|l| (per_head(l).collect(), b)).collect()
            }
            PoolScope::Global => {
                let b = round_half_up(r * (total_tokens * n_heads * n_layers) as f64);
                vec![((0..n_layers).flat_map(per_head).collect(), b)]
            }
        },
        (BudgetMode::FixedTotal(total), Allocation::Uniform) => (0..n_layers)
            .flat_map(per_head)
            .map(|(l, h)| {
                (vec![(l, h)], EvictionPolicy::fixed_head_quota(total, n_heads, h))
            })
            .collect(),
        (BudgetMode::FixedTotal(total), Allocation::Nonuniform) => {
            (0..n_layers).map(|l| (per_head(l).collect(), total)).collect()
        }
    }
}

/// Retained count a pool must end with: everything if it fits, otherwise the
/// budget, but never fewer than the exempt entries.
pub fn expected_retained(current: usize, exempt: usize, budget: usize) -> usize {
    current.min(budget.max(exempt))
}

pub fn evict(
    cache: &mut KvCache,
    policy: &EvictionPolicy,
    req: &EvictionRequest,
) -> Result<EvictionEvent> {
    let n_layers = cache.n_layers();
    let n_heads = cache.layers.first().map_or(0, |l| l.heads.len());
    let window_start = req.window_start();
    let before: Vec<Vec<usize>> = cache.shape().per_head;

    let mut pools = Vec::new();
    // keep[l][h][i]
    let mut keep: Vec<Vec<Vec<bool>>> = before
        .iter()
        .map(|l| l.iter().map(|&n| vec![false; n]).collect())
        .collect();

    for (slots, budget) in plan_pools(policy, n_layers, n_heads, req.total_tokens) {
        let mut candidates = Vec::new();
        let mut where_from = Vec::new();
        let mut exempt = 0;
        let mut current = 0;
        for &(l, h) in &slots {
            let head = &cache.layers[l].heads[h];
            current += head.len();
            for (i, (&pos, score)) in head.positions().iter().zip(head.scores()).enumerate() {
                let in_window = pos >= window_start;
                match score {
                    _ if in_window => {
                        keep[l][h][i] = true;
                        exempt += 1;
                    }
                    None if req.allow_unscored => {
                        keep[l][h][i] = true;
                        exempt += 1;
                    }
                    None => {
                        return Err(Error::InvalidInput(format!(
                            "unscored entry outside the window at layer {l} head {h} position {pos}"
                        )))
                    }
                    Some(s) => {
                        candidates.push(Candidate {
                            id: EntryId {
                                layer: l,
                                head: h,
                                position: pos,
                            },
                            score: *s,
                        });
                        where_from.push((l, h, i));
                    }
                }
            }
        }
        let quota = budget.saturating_sub(exempt).min(candidates.len());
        for idx in select_retained(&candidates, quota)? {
            let (l, h, i) = where_from[idx];
            keep[l][h][i] = true;
        }
        pools.push(PoolOutcome {
            slots,
            budget,
            exempt,
            before: current,
            after: exempt + quota,
        });
    }

    for (layer, layer_keep) in cache.layers.iter_mut().zip(&keep) {
        for (head, mask) in layer.heads.iter_mut().zip(layer_keep) {
            if mask.iter().any(|k| !k) {
                head.retain_mask(mask);
            }
        }
    }
    Ok(EvictionEvent {
        phase: req.phase,
        total_tokens: req.total_tokens,
        window_start,
        pools,
        before,
        after: cache.shape().per_head,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::cache::KvCache;

    /// One layer, `heads` heads, `n` entries each with the given scores.
    fn cache_with(scores: &[Vec<f32>]) -> KvCache {
        let mut c = KvCache::new(1, scores.len(), 2);
        let n = scores[0].len();
        for p in 0..n {
            for (h, s) in scores.iter().enumerate() {
                c.layers[0].heads[h].push(p, &[0.0, 1.0], &[1.0, 0.0]);
                c.layers[0].heads[h].set_score(p, s[p]);
            }
        }
        c.advance(n);
        c
    }

    fn req(total: usize, window: usize) -> EvictionRequest {
        EvictionRequest {
            phase: Phase::Prefill,
            total_tokens: total,
            window,
            allow_unscored: false,
        }
    }

    #[test]
    fn ratio_one_keeps_everything() {
        let scores = vec![(0..10).map(|i| i as f32 / 10.0).collect::<Vec<_>>(); 2];
        let mut c = cache_with(&scores);
        let before = c.clone();
        evict(&mut c, &EvictionPolicy::with_ratio(1.0), &req(10, 0)).unwrap();
        assert_eq!(c, before);
    }

    #[test]
    fn half_ratio_keeps_window_plus_best() {
        let scores = vec![vec![0.9, 0.1, 0.8, 0.2, 0.7, 0.3, 0.6, 0.4, 0.0, 0.0]];
        let mut c = cache_with(&scores);
        let ev = evict(&mut c, &EvictionPolicy::with_ratio(0.5), &req(10, 2)).unwrap();
        assert_eq!(c.layers[0].heads[0].positions(), &[0, 2, 4, 8, 9]);
        assert_eq!(ev.after, vec![vec![5]]);
    }

    #[test]
    fn nonuniform_favors_high_scoring_head() {
        let high: Vec<f32> = (0..10).map(|i| 0.6 + i as f32 * 0.01).collect();
        let low: Vec<f32> = (0..10).map(|i| 0.1 + i as f32 * 0.01).collect();
        let mut non = cache_with(&[high.clone(), low.clone()]);
        let mut uni = non.clone();
        let p = EvictionPolicy::with_ratio(0.5);
        evict(&mut non, &p, &req(10, 0)).unwrap();
        assert_eq!(non.layers[0].heads[0].len(), 10);
        assert_eq!(non.layers[0].heads[1].len(), 0);
        let pu = EvictionPolicy {
            allocation: Allocation::Uniform,
            ..p
        };
        evict(&mut uni, &pu, &req(10, 0)).unwrap();
        assert_eq!(uni.layers[0].heads[0].len(), 5);
        assert_eq!(uni.layers[0].heads[1].len(), 5);
    }

    #[test]
    fn window_larger_than_budget_keeps_window() {
        let mut c = cache_with(&[vec![0.5; 10]]);
        let ev = evict(&mut c, &EvictionPolicy::with_ratio(0.2), &req(10, 4)).unwrap();
        assert_eq!(c.layers[0].heads[0].positions(), &[6, 7, 8, 9]);
        assert_eq!(ev.pools[0].exempt, 4);
    }

    #[test]
    fn unscored_outside_window_is_an_error_unless_allowed() {
        let mut c = KvCache::new(1, 1, 2);
        for p in 0..4 {
            c.layers[0].heads[0].push(p, &[0.0, 0.0], &[0.0, 0.0]);
        }
        c.advance(4);
        let p = EvictionPolicy::with_ratio(0.5);
        assert!(evict(&mut c.clone(), &p, &req(4, 1)).is_err());
        let allowed = EvictionRequest {
            allow_unscored: true,
            ..req(4, 1)
        };
        let ev = evict(&mut c, &p, &allowed).unwrap();
        assert_eq!(ev.evicted(), 0);
    }

    #[test]
    fn fixed_total_caps_each_layer() {
        let scores = vec![(0..12).map(|i| (i * 7 % 5) as f32).collect::<Vec<_>>(); 2];
        let mut c = cache_with(&scores);
        let p = EvictionPolicy {
            budget: BudgetMode::FixedTotal(9),
            ..EvictionPolicy::default()
        };
        evict(&mut c, &p, &req(12, 2)).unwrap();
        assert_eq!(c.layers[0].len(), 9);
        for h in 0..2 {
            assert!(c.layers[0].heads[h].positions().ends_with(&[10, 11]));
        }
    }
}
