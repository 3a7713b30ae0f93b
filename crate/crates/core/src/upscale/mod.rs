//! Depth up-scaling: placement policies and construction of expanded models
//! from a base model.
//!
//! Both builders keep base blocks bitwise unchanged and mark only inserted
//! blocks trainable. Inserted blocks start as identity maps: memory blocks
//! through a zero value table, duplicated transformer blocks through zeroed
//! output and down projections.

mod build;
mod policy;

pub use build::{
    apply_train_mode, build_dus, build_midus, zero_init_dus_copy, InitSource, InsertKind, TrainMode, UpscalePlan,
};
pub use policy::{policy_indices, PlacementPolicy};
