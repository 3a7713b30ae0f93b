//! Training and analysis: gradient buffers, the deduplicated scatter
//! backward, optimizer and schedules, the training loop, synthetic corpora,
//! finite-difference gradient verification and head importance.

mod corpus;
pub mod gradcheck;
mod grads;
mod importance;
mod optim;
pub mod scatter;
mod trainer;

pub use corpus::{ByteCorpus, Corpus, RecallCorpus, RecallSpec, Sequence};
pub use grads::GradStore;
pub use importance::{
    head_importance, population_variance, HeadImportanceReport, IMPORTANCE_CSV_HEADER, VARIANCE_CSV_HEADER,
};
pub use optim::{group_of, AdamW, Group, GroupConfig, OptimGroups, Schedule};
pub use scatter::{dedup_scatter_accumulate, dedup_scatter_backward, weight_grad_backward, ScatterStats};
pub use trainer::{evaluate, train, StepRecord, TrainConfig, TrainReport, TRAIN_CSV_HEADER};
