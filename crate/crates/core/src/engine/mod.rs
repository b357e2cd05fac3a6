//! Inference with gated KV eviction: chunked prefill that compresses the
//! cache after every chunk, and decoding that gates buffered hidden states in
//! batches before evicting to budget.

mod decode;
mod evict;
mod policy;
mod prefill;
mod scorer;
mod select;
mod stats;

pub use decode::{decode_gated, decode_teacher_forced, decode_uncompressed, DecodeOutput, Sampler};
pub use evict::{
    evict, expected_retained, plan_pools, EvictionEvent, EvictionRequest, Phase, PoolOutcome,
};
pub use policy::{round_half_up, Allocation, BudgetMode, EvictionPolicy, PoolScope};
pub use prefill::{prefill_chunked, PrefillOutput};
pub use scorer::{ConstantScorer, KvScorer, OracleScorer, RandomScorer, RecencyScorer};
pub use select::{preference, select_retained, Candidate, EntryId};
pub use stats::EngineStats;
