use std::collections::HashSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Rng, Scalar};
use crate::transformer::{cross_entropy, ForwardOptions, Model};

use super::corpus::Corpus;
use super::grads::GradStore;
use super::optim::{AdamW, OptimGroups};
use super::scatter::ScatterStats;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub seed: u64,
    pub optim: OptimGroups,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 200,
            batch_size: 8,
            seq_len: 16,
            seed: 0,
            optim: OptimGroups::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.seq_len == 0 {
            return Err(Error::Config("train.batch_size and train.seq_len must be positive".into()));
        }
        self.optim.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub lr_base: f64,
    pub lr_dense: f64,
    pub lr_memory: f64,
    /// Distinct memory slots retrieved in the step, summed over memory blocks.
    pub unique_indices: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub records: Vec<StepRecord>,
    pub scatter: ScatterStats,
}

pub const TRAIN_CSV_HEADER: &str = "step,loss,lr_base,lr_dense,lr_memory,unique_indices";

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(TRAIN_CSV_HEADER);
        s.push('\n');
        for r in &self.records {
            let _ = writeln!(
                s,
                "{},{:.9},{:.6e},{:.6e},{:.6e},{}",
                r.step, r.loss, r.lr_base, r.lr_dense, r.lr_memory, r.unique_indices
            );
        }
        s
    }

    pub fn initial_loss(&self) -> Option<f64> {
        self.records.first().map(|r| r.loss)
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.records.last().map(|r| r.loss)
    }

    /// Mean loss over the last `n` steps.
    pub fn tail_loss(&self, n: usize) -> Option<f64> {
        let n = n.min(self.records.len());
        if n == 0 {
            return None;
        }
        let tail = &self.records[self.records.len() - n..];
        Some(tail.iter().map(|r| r.loss).sum::<f64>() / n as f64)
    }
}

/// Trains `model` in place. Sequences in a batch are processed in order and
/// their gradients summed into one store, so runs are reproducible for a
/// given seed. Frozen parameters are never touched; a model with nothing
/// trainable only records losses.
pub fn train<T: Scalar>(model: &mut Model<T>, corpus: &dyn Corpus, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    model.validate()?;
    if corpus.vocab() > model.dims.vocab {
        return Err(Error::Config(format!(
            "corpus vocabulary {} exceeds model vocabulary {}",
            corpus.vocab(),
            model.dims.vocab
        )));
    }
    let any_trainable = model.io_trainable || model.trainable.iter().any(|&t| t);
    let mut store = GradStore::new(model);
    let mut opt = AdamW::new(model, cfg.optim);
    let mut rng = Rng::new(cfg.seed).stream(1);
    let mut report = TrainReport::default();
    let inv_batch = T::from_f64(1.0 / cfg.batch_size as f64);
    for step in 0..cfg.steps {
        store.begin_step();
        let mut loss_sum = 0.0;
        let mut unique: Vec<HashSet<usize>> = Vec::new();
        for _ in 0..cfg.batch_size {
            let seq = corpus.sample(&mut rng, cfg.seq_len)?;
            let (logits, cache) = model
                .forward_with(&seq.tokens, &ForwardOptions::train())
                .map_err(|e| abort(step, e))?;
            let (loss, mut dlogits) = cross_entropy(&logits, &seq.targets, Some(&seq.mask))?;
            if !loss.is_finite() {
                return Err(Error::NumericAbort {
                    step,
                    detail: "non-finite loss".into(),
                });
            }
            loss_sum += loss.as_f64();
            for (b, idx) in cache.retrieved_indices().into_iter().enumerate() {
                if unique.len() <= b {
                    unique.push(HashSet::new());
                }
                unique[b].extend(idx.iter().copied());
            }
            if any_trainable {
                dlogits.scale(inv_batch);
                let out = model
                    .backward(&cache, &dlogits, Some(&mut store.grads), false)
                    .map_err(|e| abort(step, e))?;
                report.scatter += out.scatter;
            }
            model.update_running_stats(&cache);
        }
        let loss = loss_sum / cfg.batch_size as f64;
        if !loss.is_finite() {
            return Err(Error::NumericAbort {
                step,
                detail: "non-finite batch loss".into(),
            });
        }
        if any_trainable {
            opt.update(model, &store.grads, step, cfg.steps);
        }
        let o = &cfg.optim;
        report.records.push(StepRecord {
            step,
            loss,
            lr_base: o.base.lr_at(step, cfg.steps),
            lr_dense: o.inserted_dense.lr_at(step, cfg.steps),
            lr_memory: o.memory_keys_values.lr_at(step, cfg.steps),
            unique_indices: unique.iter().map(HashSet::len).sum(),
        });
    }
    Ok(report)
}

fn abort(step: usize, e: Error) -> Error {
    match e {
        Error::NonFinite(op) => Error::NumericAbort {
            step,
            detail: format!("non-finite values in {op}"),
        },
        other => other,
    }
}

/// Mean masked loss over `sequences` freshly drawn sequences (eval mode).
pub fn evaluate<T: Scalar>(
    model: &Model<T>,
    corpus: &dyn Corpus,
    sequences: usize,
    seq_len: usize,
    seed: u64,
) -> Result<f64> {
    if sequences == 0 {
        return Err(Error::InvalidArgument("evaluation over zero sequences".into()));
    }
    let mut rng = Rng::new(seed).stream(2);
    let caches = model.value_caches()?;
    let opts = ForwardOptions {
        value_caches: Some(&caches),
        ..ForwardOptions::default()
    };
    let mut total = 0.0;
    for _ in 0..sequences {
        let seq = corpus.sample(&mut rng, seq_len)?;
        let (logits, _) = model.forward_with(&seq.tokens, &opts)?;
        total += cross_entropy(&logits, &seq.targets, Some(&seq.mask))?.0.as_f64();
    }
    Ok(total / sequences as f64)
}
