//! Sources of per-entry importance scores for the engine.

use crate::error::{Error, Result};
use crate::gate::GateSet;
use crate::targets::ImportanceScores;

/// Scores new cache entries from the gate-input hidden states of one layer.
///
/// `hiddens` is `positions.len() x d_model`; the result is
/// `positions.len() x n_kv_heads`, values in `[0, 1]`. Implementations must be
/// stateless so that batching does not change scores.
pub trait KvScorer: Sync {
    fn score(&self, layer: usize, hiddens: &[f32], positions: &[usize]) -> Result<Vec<f32>>;

    fn name(&self) -> &str;
}

impl KvScorer for GateSet {
    fn score(&self, layer: usize, hiddens: &[f32], _positions: &[usize]) -> Result<Vec<f32>> {
        GateSet::score(self, layer, hiddens)
    }

    fn name(&self) -> &str {
        "gate"
    }
}

/// Precomputed targets over positions `0..len` (e.g. reconstruction targets
/// of the prompt).
pub struct OracleScorer {
    pub scores: ImportanceScores,
}

impl KvScorer for OracleScorer {
    fn score(&self, layer: usize, _hiddens: &[f32], positions: &[usize]) -> Result<Vec<f32>> {
        let s = &self.scores;
        let mut out = Vec::with_capacity(positions.len() * s.n_heads);
        for &p in positions {
            if p >= s.len || layer >= s.n_layers {
                return Err(Error::InvalidInput(format!(
                    "oracle scores do not cover layer {layer} position {p}"
                )));
            }
            for h in 0..s.n_heads {
                out.push(s.get(layer, h, p));
            }
        }
        Ok(out)
    }

    fn name(&self) -> &str {
        "oracle"
    }
}

/// Uniform pseudo-random scores, a pure function of `(seed, layer, head, position)`.
pub struct RandomScorer {
    pub seed: u64,
    pub n_heads: usize,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl RandomScorer {
    pub fn value(&self, layer: usize, head: usize, position: usize) -> f32 {
        let mut h = splitmix64(self.seed);
        for v in [layer, head, position] {
            h = splitmix64(h ^ v as u64);
        }
        ((h >> 40) as f32) / (1u64 << 24) as f32
    }
}

impl KvScorer for RandomScorer {
    fn score(&self, layer: usize, _hiddens: &[f32], positions: &[usize]) -> Result<Vec<f32>> {
        Ok(positions
            .iter()
            .flat_map(|&p| (0..self.n_heads).map(move |h| self.value(layer, h, p)))
            .collect())
    }

    fn name(&self) -> &str {
        "random"
    }
}

/// Later positions score higher; keeps the most recent tokens.
pub struct RecencyScorer {
    pub n_heads: usize,
    pub max_position: usize,
}

impl KvScorer for RecencyScorer {
    fn score(&self, _layer: usize, _hiddens: &[f32], positions: &[usize]) -> Result<Vec<f32>> {
        let denom = self.max_position.max(1) as f64;
        Ok(positions
            .iter()
            .flat_map(|&p| std::iter::repeat_n((p as f64 / denom) as f32, self.n_heads))
            .collect())
    }

    fn name(&self) -> &str {
        "recency"
    }
}

/// Scores every entry 1.0; useful when no eviction is wanted.
pub struct ConstantScorer {
    pub n_heads: usize,
}

impl KvScorer for ConstantScorer {
    fn score(&self, _layer: usize, _hiddens: &[f32], positions: &[usize]) -> Result<Vec<f32>> {
        Ok(vec![1.0; positions.len() * self.n_heads])
    }

    fn name(&self) -> &str {
        "constant"
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn random_scores_are_stateless_and_in_range() {
        let r = RandomScorer { seed: 3, n_heads: 2 };
        let a = r.score(1, &[], &[5, 6, 7]).unwrap();
        let b: Vec<f32> = [5, 6, 7]
            .iter()
            .flat_map(|&p| r.score(1, &[], &[p]).unwrap())
            .collect();
        assert_eq!(a, b);
        assert!(a.iter().all(|&v| (0.0..1.0).contains(&v)));
        let other = RandomScorer { seed: 4, n_heads: 2 };
        assert_ne!(a, other.score(1, &[], &[5, 6, 7]).unwrap());
    }

    #[test]
    fn oracle_rejects_uncovered_positions() {
        let o = OracleScorer {
            scores: ImportanceScores::zeros(1, 2, 4),
        };
        assert!(o.score(0, &[], &[3]).is_ok());
        assert!(o.score(0, &[], &[4]).is_err());
    }

    #[test]
    fn recency_increases() {
        let r = RecencyScorer {
            n_heads: 1,
            max_position: 100,
        };
        let s = r.score(0, &[], &[1, 2, 50]).unwrap();
        assert!(s[0] < s[1] && s[1] < s[2]);
    }
}
