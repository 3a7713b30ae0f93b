//! Dense tensor kernels shared by every layer: matmul, softmax, RMS
//! normalization, deterministic Top-k and a seeded generator.
//!
//! All kernels are pure functions with a fixed floating-point evaluation
//! order, so a given input and precision always produce the same bits.

pub mod macs;
mod ops;
mod rng;
mod scalar;
mod tensor;
mod topk;

pub use ops::{
    axpy_slice, dot, matmul, matmul_nt, matmul_tn, rms_norm, rms_norm_backward, softmax,
    softmax_backward_slice, softmax_in_place,
};
pub use rng::Rng;
pub use scalar::{c, Precision, Scalar};
pub use tensor::Tensor;
pub use topk::{rank_order, select_top, topk};
