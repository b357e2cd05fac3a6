//! Gated KV-cache eviction for decoder-only grouped-query-attention
//! transformers.
//!
//! A frozen toy decoder ([`model`]) provides hidden states and attention.
//! Reconstruction targets ([`targets`]) record the largest attention each
//! context KV pair receives while the model repeats the context; per-layer
//! sink-attention gates ([`gate`]) are distilled onto those targets
//! ([`trainer`]). At inference the [`engine`] runs chunked prefill and
//! buffered decoding, scoring new KV entries with the gates and evicting the
//! lowest-scored ones under a ratio or fixed budget.

pub mod engine;
pub mod error;
pub mod format;
pub mod gate;
pub mod metrics;
pub mod model;
pub mod targets;
pub mod tokenizer;
pub mod trainer;

pub use error::{Error, Result};
