use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How large the cache may be after an eviction event.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BudgetMode {
    /// Keep this fraction of the uncompressed cache (`tokens seen * heads`).
    Ratio(f64),
    /// Keep at most this many entries per layer.
    FixedTotal(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Allocation {
    /// Each head gets the same quota.
    Uniform,
    /// One score threshold across a pool of heads.
    #[default]
    Nonuniform,
}

/// Pool used by non-uniform allocation in ratio mode. Fixed budgets are
/// always pooled per layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PoolScope {
    #[default]
    Global,
    PerLayer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvictionPolicy {
    pub budget: BudgetMode,
    pub allocation: Allocation,
    pub nonuniform_scope: PoolScope,
    pub chunk_size: usize,
    pub prefill_window: usize,
    /// Window used instead of `prefill_window` when the whole input is shorter
    /// than one chunk: `ceil(fraction * T)` tokens.
    pub short_context_window_fraction: f64,
    pub decode_buffer: usize,
    pub decode_window: usize,
}

impl Default for EvictionPolicy {
    fn default() -> Self {
        Self {
            budget: BudgetMode::Ratio(1.0),
            allocation: Allocation::Nonuniform,
            nonuniform_scope: PoolScope::Global,
            chunk_size: 64,
            prefill_window: 16,
            short_context_window_fraction: 0.02,
            decode_buffer: 8,
            decode_window: 8,
        }
    }
}

/// `floor(x + 0.5)`: half-up rounding for every quota.
pub fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor().max(0.0) as usize
}

impl EvictionPolicy {
    pub fn with_ratio(ratio: f64) -> Self {
        Self {
            budget: BudgetMode::Ratio(ratio),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.budget {
            BudgetMode::Ratio(r) if !(r > 0.0 && r <= 1.0) => {
                return Err(Error::Config(format!("budget ratio must be in (0, 1], got {r}")))
            }
            BudgetMode::FixedTotal(0) => {
                return Err(Error::Config("fixed_total budget must be >= 1".into()))
            }
            _ => {}
        }
        if self.chunk_size == 0 || self.decode_buffer == 0 {
            return Err(Error::Config("chunk_size and decode_buffer must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.short_context_window_fraction) {
            return Err(Error::Config(
                "short_context_window_fraction must be in [0, 1]".into(),
            ));
        }
        Ok(())
    }

    /// Local window for a prefill of `total_tokens` tokens.
    pub fn prefill_window_for(&self, total_tokens: usize) -> usize {
        if total_tokens < self.chunk_size {
            (self.short_context_window_fraction * total_tokens as f64).ceil() as usize
        } else {
            self.prefill_window
        }
    }

    /// Per-head quotas of a fixed per-layer budget under uniform allocation;
    /// the remainder goes to the lowest-index heads.
    pub fn fixed_head_quota(total: usize, n_heads: usize, head: usize) -> usize {
        total / n_heads + usize::from(head < total % n_heads)
    }

    /// Rejects budgets that cannot hold the decode window.
    pub fn check_decode_capacity(&self, n_heads: usize) -> Result<()> {
        if let BudgetMode::FixedTotal(total) = self.budget {
            let smallest = match self.allocation {
                Allocation::Uniform => Self::fixed_head_quota(total, n_heads, n_heads - 1),
                Allocation::Nonuniform => total / n_heads,
            };
            if smallest < self.decode_window {
                return Err(Error::Config(format!(
                    "fixed budget {total} over {n_heads} heads cannot hold decode_window {}",
                    self.decode_window
                )));
            }
        }
        Ok(())
    }
}
