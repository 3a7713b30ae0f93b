//! Memory blocks: Linear, PKM and HML retrieval layers behind a shared
//! attention front end.
//!
//! Every block computes `y = x + m` where `m` comes from a query pipeline
//! `rms → Attn' → [residual] → [W_q] → [BatchNorm] → [LayerNorm]` followed by
//! per-head Top-k retrieval. Which stages run is data: [`MemoryLayerKind`]
//! carries the layer kind plus four toggles, so ablations are config sweeps.

mod banks;
mod block;
mod kind;
mod norm;

pub use banks::{linear_memory_forward, pkm_memory_forward, HmlBank, LinearMemoryBank, MemoryBank, PkmBank};
pub use block::{hml_block_forward, MemoryBlock, MemoryCache, MemoryForward};
pub use kind::{LayerKind, MemoryLayerKind, Toggles};
pub use norm::{
    batchnorm_query, layer_norm, layer_norm_backward, BatchNorm, BnCache, NormMode, BN_EPS, BN_MOMENTUM,
    LN_EPS,
};
