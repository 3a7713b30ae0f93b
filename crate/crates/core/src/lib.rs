//! Memory-infused depth up-scaling for small decoder-only transformers.
//!
//! The crate builds a toy pre-norm decoder and expands it with inserted
//! Memory blocks whose feed-forward network is replaced by a sparse
//! key–value retrieval layer. Three retrieval layers are provided: a flat
//! (linear) memory, a multi-head product-key memory, and the head-wise memory
//! layer in which every attention head owns a product-key bank and values come
//! from a shared head-width table expanded by small per-head transforms.
//!
//! Module map:
//!
//! - [`numerics`]: tensors and deterministic kernels.
//! - [`memory`]: product-key banks, two-stage and fused Top-k retrieval,
//!   factorized value banks and inference-time value caches.
//! - [`layers`]: the Linear, PKM and HML memory blocks.
//! - [`transformer`]: attention, feed-forward, blocks, model and loss.
//! - [`upscale`]: placement policies and DUS / MIDUS model construction.
//! - [`train`]: deduplicated scatter backward, gradient verification,
//!   optimizer, training loop and head-importance analysis.

pub mod error;
pub mod layers;
pub mod memory;
pub mod numerics;
pub mod params;
pub mod train;
pub mod transformer;
pub mod upscale;

pub use error::{Error, Result};
pub use numerics::{Precision, Rng, Scalar, Tensor};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/retrieval.md")]
    mod retrieval {}
    #[doc = include_str!("../../../book/src/values.md")]
    mod values {}
    #[doc = include_str!("../../../book/src/memory-blocks.md")]
    mod memory_blocks {}
    #[doc = include_str!("../../../book/src/upscaling.md")]
    mod upscaling {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
