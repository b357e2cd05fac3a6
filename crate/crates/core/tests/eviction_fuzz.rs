//! Randomized eviction events checked against an independent model of the
//! budget rules: every pool ends with exactly `min(current, max(exempt,
//! budget))` entries, window and unscored entries survive, and the evictable
//! entries kept are the best by (score desc, position desc, layer asc, head asc).

use std::collections::BTreeSet;

use fastkv_core::engine::{
    decode_gated, evict, prefill_chunked, Allocation, BudgetMode, EvictionPolicy, EvictionRequest, KvScorer, Phase,
    PoolScope, RandomScorer, Sampler,
};
use fastkv_core::model::{init_model, Capture, KvCache, ModelConfig, Transformer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn model() -> Transformer {
    let cfg = ModelConfig {
        n_layers: 2,
        d_model: 16,
        d_head: 4,
        d_ff: 24,
        max_position: 1024,
        ..ModelConfig::default()
    };
    init_model(&cfg, 11).unwrap()
}

fn random_policy(rng: &mut ChaCha8Rng) -> EvictionPolicy {
    let budget = if rng.random_bool(0.7) {
        BudgetMode::Ratio(f64::from(rng.random_range(1u32..=20)) / 20.0)
    } else {
        BudgetMode::FixedTotal(rng.random_range(1..120))
    };
    EvictionPolicy {
        budget,
        allocation: if rng.random_bool(0.5) { Allocation::Uniform } else { Allocation::Nonuniform },
        nonuniform_scope: if rng.random_bool(0.5) { PoolScope::Global } else { PoolScope::PerLayer },
        chunk_size: rng.random_range(1..48),
        prefill_window: rng.random_range(0..12),
        short_context_window_fraction: [0.0, 0.02, 0.1, 0.5][rng.random_range(0..4)],
        decode_buffer: rng.random_range(1..10),
        decode_window: rng.random_range(0..6),
    }
}

/// `(layer, head)` slots and budget of each pool, straight from the rules.
fn expected_pools(p: &EvictionPolicy, layers: usize, heads: usize, t: usize) -> Vec<(Vec<(usize, usize)>, usize)> {
    let half_up = |x: f64| (x + 0.5).floor() as usize;
    let all_heads = |l: usize| (0..heads).map(move |h| (l, h)).collect::<Vec<_>>();
    let mut out = Vec::new();
    match p.budget {
        BudgetMode::Ratio(r) => match p.allocation {
            Allocation::Uniform => {
                for l in 0..layers {
                    for h in 0..heads {
                        out.push((vec![(l, h)], half_up(r * t as f64)));
                    }
                }
            }
            Allocation::Nonuniform if p.nonuniform_scope == PoolScope::Global => {
                let slots = (0..layers).flat_map(all_heads).collect();
                out.push((slots, half_up(r * (t * heads * layers) as f64)));
            }
            Allocation::Nonuniform => {
                for l in 0..layers {
                    out.push((all_heads(l), half_up(r * (t * heads) as f64)));
                }
            }
        },
        BudgetMode::FixedTotal(b) => {
            for l in 0..layers {
                match p.allocation {
                    Allocation::Nonuniform => out.push((all_heads(l), b)),
                    Allocation::Uniform => {
                        for h in 0..heads {
                            let q = b / heads + usize::from(h < b % heads);
                            out.push((vec![(l, h)], q));
                        }
                    }
                }
            }
        }
    }
    out
}

type Snapshot = Vec<Vec<Vec<(usize, Option<f32>)>>>;

fn snapshot(cache: &KvCache) -> Snapshot {
    cache
        .layers
        .iter()
        .map(|l| {
            l.heads
                .iter()
                .map(|h| h.positions().iter().copied().zip(h.scores().iter().copied()).collect())
                .collect()
        })
        .collect()
}

#[derive(Default)]
struct Tally {
    events: usize,
    window_violations: usize,
    budget_violations: usize,
    selection_violations: usize,
}

fn checked_evict(cache: &mut KvCache, policy: &EvictionPolicy, req: &EvictionRequest, tally: &mut Tally) {
    let before = snapshot(cache);
    let total = cache.seen_tokens();
    let ws = total.saturating_sub(req.window);
    let ev = evict(cache, policy, req).unwrap();
    let after = snapshot(cache);
    tally.events += 1;
    assert_eq!(ev.window_start, ws);

    let (layers, heads) = (before.len(), before[0].len());
    for (slots, budget) in expected_pools(policy, layers, heads, total) {
        let mut exempt = Vec::new();
        // (score, position, layer, head)
        let mut evictable: Vec<(f32, usize, usize, usize)> = Vec::new();
        for &(l, h) in &slots {
            for &(pos, score) in &before[l][h] {
                match score {
                    _ if pos >= ws => exempt.push((l, h, pos)),
                    None => exempt.push((l, h, pos)),
                    Some(s) => evictable.push((s, pos, l, h)),
                }
            }
        }
        let current = exempt.len() + evictable.len();
        let expected = current.min(budget.max(exempt.len()));
        let kept: BTreeSet<(usize, usize, usize)> = slots
            .iter()
            .flat_map(|&(l, h)| after[l][h].iter().map(move |&(p, _)| (l, h, p)))
            .collect();
        if kept.len() != expected {
            tally.budget_violations += 1;
        }
        tally.window_violations += exempt.iter().filter(|e| !kept.contains(e)).count();

        evictable.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap()
                .then(b.1.cmp(&a.1))
                .then(a.2.cmp(&b.2))
                .then(a.3.cmp(&b.3))
        });
        let n_best = expected - exempt.len().min(expected);
        let best: BTreeSet<_> = evictable[..n_best.min(evictable.len())]
            .iter()
            .map(|&(_, p, l, h)| (l, h, p))
            .collect();
        let kept_evictable: BTreeSet<_> = kept.iter().copied().filter(|e| !exempt.contains(e)).collect();
        if kept_evictable != best {
            tally.selection_violations += 1;
        }
    }
    if let BudgetMode::FixedTotal(b) = policy.budget {
        for (l, layer) in after.iter().enumerate() {
            let n: usize = layer.iter().map(Vec::len).sum();
            let ex: usize = before[l]
                .iter()
                .flatten()
                .filter(|(p, s)| *p >= ws || s.is_none())
                .count();
            if ex <= b && n > b {
                tally.budget_violations += 1;
            }
        }
    }
}

fn score_positions(model: &Transformer, scorer: &dyn KvScorer, cache: &mut KvCache, hidden: &[Vec<f32>], positions: &[usize]) {
    let heads = model.config.n_kv_heads;
    for (l, hs) in hidden.iter().enumerate() {
        let s = scorer.score(l, hs, positions).unwrap();
        for (i, &p) in positions.iter().enumerate() {
            for h in 0..heads {
                assert!(cache.layers[l].heads[h].set_score(p, s[i * heads + h]));
            }
        }
    }
}

#[test]
fn every_event_obeys_window_and_budget_rules() {
    let model = model();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut tally = Tally::default();
    for case in 0..160 {
        let policy = random_policy(&mut rng);
        let scorer = RandomScorer {
            seed: case,
            n_heads: model.config.n_kv_heads,
        };
        let t = rng.random_range(1..120);
        let tokens: Vec<u32> = (0..t).map(|_| rng.random_range(0..256)).collect();
        let window = if t < policy.chunk_size {
            (policy.short_context_window_fraction * t as f64).ceil() as usize
        } else {
            policy.prefill_window
        };
        let mut cache = model.empty_cache();
        for chunk in tokens.chunks(policy.chunk_size) {
            let out = model.forward(chunk, &mut cache, Capture::HIDDEN).unwrap();
            score_positions(&model, &scorer, &mut cache, &out.hidden, &out.positions);
            let req = EvictionRequest {
                phase: Phase::Prefill,
                total_tokens: cache.seen_tokens(),
                window,
                allow_unscored: false,
            };
            checked_evict(&mut cache, &policy, &req, &mut tally);
        }

        if policy.check_decode_capacity(model.config.n_kv_heads).is_err() {
            continue;
        }
        let steps = rng.random_range(0..30);
        let mut pending_hidden: Vec<Vec<f32>> = vec![Vec::new(); model.config.n_layers];
        let mut pending_pos = Vec::new();
        let decode_req = |cache: &KvCache| EvictionRequest {
            phase: Phase::Decode,
            total_tokens: cache.seen_tokens(),
            window: policy.decode_window,
            allow_unscored: true,
        };
        for step in 0..steps {
            let tok = rng.random_range(0..256);
            let out = model.forward(&[tok], &mut cache, Capture::HIDDEN).unwrap();
            for (p, h) in pending_hidden.iter_mut().zip(&out.hidden) {
                p.extend_from_slice(h);
            }
            pending_pos.extend(&out.positions);
            // Occasionally evict with unscored entries still buffered.
            if rng.random_bool(0.2) {
                let req = decode_req(&cache);
                checked_evict(&mut cache, &policy, &req, &mut tally);
            }
            if pending_pos.len() == policy.decode_buffer || step + 1 == steps {
                score_positions(&model, &scorer, &mut cache, &pending_hidden, &pending_pos);
                pending_hidden.iter_mut().for_each(Vec::clear);
                pending_pos.clear();
                let req = decode_req(&cache);
                checked_evict(&mut cache, &policy, &req, &mut tally);
            }
        }
    }
    println!(
        "eviction fuzz: {} events, {} window / {} budget / {} selection violations",
        tally.events, tally.window_violations, tally.budget_violations, tally.selection_violations
    );
    assert!(tally.events >= 1000, "only {} events", tally.events);
    assert_eq!(tally.window_violations, 0);
    assert_eq!(tally.budget_violations, 0);
    assert_eq!(tally.selection_violations, 0);
}

#[test]
fn engine_events_match_formulae() {
    let model = model();
    let (layers, heads) = (model.config.n_layers, model.config.n_kv_heads);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut events = 0;
    for case in 0..60 {
        let policy = random_policy(&mut rng);
        if policy.check_decode_capacity(heads).is_err() {
            continue;
        }
        let scorer = RandomScorer { seed: case, n_heads: heads };
        let t: usize = rng.random_range(1..150);
        let tokens: Vec<u32> = (0..t).map(|_| rng.random_range(0..256)).collect();
        let mut pre = prefill_chunked(&model, &scorer, &tokens, &policy).unwrap();
        let steps = rng.random_range(0..25);
        let dec = decode_gated(&model, &scorer, &mut pre.cache, &pre.last_logits, steps, &policy, Sampler::Greedy).unwrap();
        assert_eq!(pre.stats.gating_events, t.div_ceil(policy.chunk_size));
        assert_eq!(dec.stats.gating_events, steps.div_ceil(policy.decode_buffer));

        let prefill_window = if t < policy.chunk_size {
            (policy.short_context_window_fraction * t as f64).ceil() as usize
        } else {
            policy.prefill_window
        };
        for ev in pre.stats.events.iter().chain(&dec.stats.events) {
            events += 1;
            let w = match ev.phase {
                Phase::Prefill => prefill_window,
                Phase::Decode => policy.decode_window,
            };
            assert_eq!(ev.window_start, ev.total_tokens.saturating_sub(w));
            let expected = expected_pools(&policy, layers, heads, ev.total_tokens);
            assert_eq!(ev.pools.len(), expected.len());
            for (pool, (slots, budget)) in ev.pools.iter().zip(expected) {
                assert_eq!(pool.slots, slots);
                assert_eq!(pool.budget, budget);
                assert_eq!(pool.after, pool.before.min(budget.max(pool.exempt)));
                let after: usize = slots.iter().map(|&(l, h)| ev.after[l][h]).sum();
                assert_eq!(after, pool.after);
            }
        }
        // The final window is intact.
        let total = pre.cache.seen_tokens();
        let ws = total.saturating_sub(if steps > 0 { policy.decode_window } else { prefill_window });
        for layer in &pre.cache.layers {
            for head in &layer.heads {
                let kept: BTreeSet<usize> = head.positions().iter().copied().collect();
                assert!((ws..total).all(|p| kept.contains(&p)));
            }
        }
    }
    assert!(events > 200);
}
