//! Deterministic model and corpus construction from a config.

use midus::train::{ByteCorpus, Corpus, RecallCorpus};
use midus::transformer::Model;
use midus::upscale::{apply_train_mode, build_dus, build_midus, InsertKind};
use midus::{Rng, Scalar};

use crate::config::{DataKind, ExperimentConfig};
use crate::error::CliError;

const BASE_STREAM: u64 = 10;
const UPSCALE_STREAM: u64 = 11;
const BASE_TRAIN_SALT: u64 = 0x5eed_ba5e;

pub fn corpus(cfg: &ExperimentConfig) -> Result<Box<dyn Corpus>, CliError> {
    match cfg.data.kind {
        DataKind::Recall => Ok(Box::new(RecallCorpus::new(cfg.data.recall)?)),
        DataKind::Bytes => {
            let path = cfg
                .data
                .path
                .as_ref()
                .ok_or_else(|| CliError::Config("data.path is required when data.kind = \"bytes\"".into()))?;
            if !path.is_file() {
                return Err(CliError::Config(format!(
                    "data.path: corpus file {} does not exist",
                    path.display()
                )));
            }
            Ok(Box::new(ByteCorpus::from_file(path)?))
        }
    }
}

/// Randomly initialized base model. Depends only on the seed and the model
/// section, so every method in a sweep starts from the same base.
pub fn base_model<T: Scalar>(cfg: &ExperimentConfig) -> Result<Model<T>, CliError> {
    let mut rng = Rng::new(cfg.seed).stream(BASE_STREAM);
    let mut m = Model::base(cfg.model.dims(), cfg.model.layers, &mut rng)?;
    m.retrieval = cfg.retrieval_path();
    Ok(m)
}

/// Applies the configured up-scaling to `base` and sets trainability for
/// the configured mode. Returns the model and the insert positions.
pub fn upscale<T: Scalar>(cfg: &ExperimentConfig, base: &Model<T>) -> Result<(Model<T>, Vec<usize>), CliError> {
    let (mut model, inserted) = match cfg.plan()? {
        None => (base.clone(), Vec::new()),
        Some(plan) => match plan.insert_kind {
            InsertKind::TransformerCopy { .. } => build_dus(base, &plan)?,
            InsertKind::MemoryBlock { .. } => {
                let mut rng = Rng::new(cfg.seed).stream(UPSCALE_STREAM);
                build_midus(base, &plan, &mut rng)?
            }
        },
    };
    apply_train_mode(&mut model, &inserted, cfg.upscale.mode);
    model.retrieval = cfg.retrieval_path();
    Ok((model, inserted))
}

/// Model with the configured shapes and untrained weights.
pub fn skeleton<T: Scalar>(cfg: &ExperimentConfig) -> Result<Model<T>, CliError> {
    Ok(upscale(cfg, &base_model(cfg)?)?.0)
}

/// Base model, pre-trained for `train.base_steps` steps when requested.
pub fn pretrained_base<T: Scalar>(cfg: &ExperimentConfig, corpus: &dyn Corpus) -> Result<Model<T>, CliError> {
    let mut base = base_model::<T>(cfg)?;
    if cfg.train.base_steps > 0 {
        let tc = cfg.train_config(cfg.train.base_steps, cfg.seed ^ BASE_TRAIN_SALT);
        midus::train::train(&mut base, corpus, &tc)?;
    }
    Ok(base)
}
