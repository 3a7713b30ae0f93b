//! Pre-norm decoder backbone: rotary causal attention, gated feed-forward,
//! transformer blocks, the block stack and the language-modeling loss.

mod attention;
mod block;
mod ffn;
mod loss;
mod model;

pub use attention::{causal_attention, rope_rotate, AttentionCache, AttentionParams, DEFAULT_ROPE_BASE};
pub use block::{transformer_block_forward, BlockCache, TransformerBlockParams, NORM_EPS};
pub use ffn::{FeedForward, FfnCache};
pub use loss::{cross_entropy, lm_loss};
pub use model::{
    block_index, model_forward, BackwardOutput, Block, ForwardOptions, HeadScale, Model, ModelCache, ModelDims,
};
