//! Sparse-retrieval core: product-key banks, Top-k selection kernels and the
//! factorized value store.
//!
//! A head's query `q_h = [q_row | q_col]` scores against `n` row sub-keys and
//! `n` column sub-keys. The `N = n²` composite keys are never materialized:
//! slot `π(i, j) = i·n + j` scores `S_row(i) + S_col(j)`. Two selection
//! kernels produce identical results:
//!
//! - [`two_stage_topk`]: per-axis Top-k, then Top-k over the `k²` pairs.
//! - [`fused_cartesian_topk`]: one Top-k over all `n²` pair scores, cheaper to
//!   orchestrate for very short inputs.
//!
//! Retrieved slots index a [`ValueBank`]; [`build_value_cache`] trades memory
//! for skipping the per-head transform at inference time.

mod accounting;
mod config;
mod keys;
mod retrieval;
mod values;

pub use accounting::{lookup_cost, param_count, total_slots, LookupCost, LookupScheme, ParamScheme};
pub use config::MemoryConfig;
pub use keys::{score_subkeys, score_subkeys_backward, ProductKeyBank};
pub use retrieval::{
    flat_index, flat_topk, fused_cartesian_topk, select_product_keys, split_index,
    two_stage_topk, HeadSelection, RetrievalPath, RetrievalResult, DEFAULT_FUSED_THRESHOLD,
};
pub use values::{build_value_cache, cached_aggregate, hive_aggregate, ValueBank, ValueCache};
pub(crate) use values::{hive_backward, hive_forward};
