//! Experiment configuration file.
//!
//! A single TOML file describes a run. Unknown keys are rejected and every
//! section is validated against the library's invariants before anything
//! executes. Omitted sections take the defaults below.
//!
//! ```toml
//! seed = 0
//! precision = "f32"        # or "f64"
//! fused_threshold = 16     # retrieval uses the fused kernel up to this many tokens
//!
//! [model]
//! vocab = 256
//! d = 64
//! heads = 4
//! d_ff = 256
//! layers = 8
//!
//! [memory]
//! kind = "hml"             # linear | pkm | hml
//! sub_keys = 16
//! top_k = 4
//! # query_batchnorm / query_layernorm / internal_residual / output_projection
//!
//! [upscale]
//! method = "midus"         # midus | dus | none
//! policy = "distributed"   # distributed | top_heavy | bottom_heavy | llama_pro
//! inserts = 4
//! mode = "cpt"             # cpt | sft
//!
//! [data]
//! kind = "recall"          # recall | bytes (needs path)
//!
//! [train]
//! steps = 200
//! batch_size = 8
//! seq_len = 16
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use midus::layers::{LayerKind, MemoryLayerKind, Toggles};
use midus::memory::{MemoryConfig, RetrievalPath};
use midus::train::{OptimGroups, RecallSpec, TrainConfig};
use midus::transformer::ModelDims;
use midus::upscale::{InitSource, InsertKind, PlacementPolicy, TrainMode, UpscalePlan};
use midus::Precision;

use crate::error::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub precision: Precision,
    pub fused_threshold: usize,
    pub model: ModelSection,
    pub memory: MemorySection,
    pub upscale: UpscaleSection,
    pub data: DataSection,
    pub train: TrainSection,
    pub optim: OptimGroups,
    pub eval: EvalSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            precision: Precision::F32,
            fused_threshold: midus::memory::DEFAULT_FUSED_THRESHOLD,
            model: ModelSection::default(),
            memory: MemorySection::default(),
            upscale: UpscaleSection::default(),
            data: DataSection::default(),
            train: TrainSection::default(),
            optim: OptimGroups::default(),
            eval: EvalSection::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub vocab: usize,
    pub d: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub layers: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let d = ModelDims::default();
        ModelSection {
            vocab: d.vocab,
            d: d.d,
            heads: d.heads,
            d_ff: d.d_ff,
            layers: 8,
        }
    }
}

impl ModelSection {
    pub fn dims(&self) -> ModelDims {
        ModelDims {
            vocab: self.vocab,
            d: self.d,
            heads: self.heads,
            d_ff: self.d_ff,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MemorySection {
    pub kind: LayerKind,
    pub sub_keys: usize,
    pub top_k: usize,
    pub query_batchnorm: Option<bool>,
    pub query_layernorm: Option<bool>,
    pub internal_residual: Option<bool>,
    pub output_projection: Option<bool>,
}

impl Default for MemorySection {
    fn default() -> Self {
        MemorySection {
            kind: LayerKind::Hml,
            sub_keys: 16,
            top_k: 4,
            query_batchnorm: None,
            query_layernorm: None,
            internal_residual: None,
            output_projection: None,
        }
    }
}

impl MemorySection {
    pub fn layer_kind(&self) -> MemoryLayerKind {
        let d = MemoryLayerKind::new(self.kind).toggles;
        MemoryLayerKind::with_toggles(
            self.kind,
            Toggles {
                query_batchnorm: self.query_batchnorm.unwrap_or(d.query_batchnorm),
                query_layernorm: self.query_layernorm.unwrap_or(d.query_layernorm),
                internal_residual: self.internal_residual.unwrap_or(d.internal_residual),
                output_projection: self.output_projection.unwrap_or(d.output_projection),
            },
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpscaleMethod {
    Midus,
    Dus,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UpscaleSection {
    pub method: UpscaleMethod,
    pub policy: PlacementPolicy,
    pub inserts: usize,
    /// Defaults to `subsequent` for MIDUS and `preceding` for DUS.
    pub init_source: Option<InitSource>,
    /// DUS only: zero the copies' output projections.
    pub identity_init: bool,
    pub mode: TrainMode,
}

impl Default for UpscaleSection {
    fn default() -> Self {
        UpscaleSection {
            method: UpscaleMethod::Midus,
            policy: PlacementPolicy::Distributed,
            inserts: 4,
            init_source: None,
            identity_init: true,
            mode: TrainMode::Cpt,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataKind {
    Recall,
    Bytes,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub kind: DataKind,
    pub path: Option<PathBuf>,
    pub recall: RecallSpec,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            kind: DataKind::Recall,
            path: None,
            recall: RecallSpec::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub steps: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    /// Steps of full training on the base model before up-scaling.
    pub base_steps: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            steps: 200,
            batch_size: 8,
            seq_len: 16,
            base_steps: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub sequences: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { sequences: 64 }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        if let Some(p) = cfg.data.path.as_mut() {
            if p.is_relative() {
                if let Some(dir) = path.parent() {
                    *p = dir.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn memory_config(&self) -> Result<MemoryConfig, CliError> {
        Ok(MemoryConfig::new(
            self.model.heads,
            self.memory.sub_keys,
            self.memory.top_k,
            self.model.d,
        )?)
    }

    pub fn retrieval_path(&self) -> RetrievalPath {
        RetrievalPath::Auto {
            threshold: self.fused_threshold,
        }
    }

    pub fn plan(&self) -> Result<Option<UpscalePlan>, CliError> {
        let u = &self.upscale;
        let (insert_kind, default_source) = match u.method {
            UpscaleMethod::None => return Ok(None),
            UpscaleMethod::Midus => (
                InsertKind::MemoryBlock {
                    layer: self.memory.layer_kind(),
                    memory: self.memory_config()?,
                },
                InitSource::Subsequent,
            ),
            UpscaleMethod::Dus => (
                InsertKind::TransformerCopy {
                    identity_init: u.identity_init,
                },
                InitSource::Preceding,
            ),
        };
        Ok(Some(UpscalePlan {
            policy: u.policy,
            inserts: u.inserts,
            insert_kind,
            init_source: u.init_source.unwrap_or(default_source),
        }))
    }

    pub fn train_config(&self, steps: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            steps,
            batch_size: self.train.batch_size,
            seq_len: self.train.seq_len,
            seed,
            optim: self.optim,
        }
    }

    /// Checks every invariant that can be checked without touching files.
    pub fn validate(&self) -> Result<(), CliError> {
        self.model.dims().validate()?;
        if self.fused_threshold == 0 {
            return Err(CliError::Config("fused_threshold must be at least 1".into()));
        }
        if self.upscale.method != UpscaleMethod::None || self.memory.kind != LayerKind::Hml {
            self.memory_config()?;
        }
        if self.upscale.method != UpscaleMethod::None && self.upscale.inserts > self.model.layers {
            return Err(CliError::Config(format!(
                "upscale.inserts = {} exceeds model.layers = {}",
                self.upscale.inserts, self.model.layers
            )));
        }
        if self.upscale.method != UpscaleMethod::None {
            let p = midus::upscale::policy_indices(self.upscale.policy, self.model.layers, self.upscale.inserts)?;
            let source = self.plan()?.map(|p| p.init_source);
            let l = self.model.layers;
            for (t, &pos) in p.iter().enumerate() {
                let base_before = pos - t;
                let ok = match source {
                    Some(InitSource::Preceding) => base_before > 0,
                    Some(InitSource::Subsequent) => base_before < l,
                    Some(InitSource::AverageAdjacent) => base_before > 0 && base_before < l,
                    None => true,
                };
                if !ok {
                    return Err(CliError::Config(format!(
                        "upscale.init_source: insert at position {pos} under policy {} has no {:?} base block",
                        self.upscale.policy,
                        source.expect("checked")
                    )));
                }
            }
        }
        self.train_config(self.train.steps, self.seed).validate()?;
        if self.data.kind == DataKind::Bytes && self.data.path.is_none() {
            return Err(CliError::Config("data.path is required when data.kind = \"bytes\"".into()));
        }
        if self.data.kind == DataKind::Recall {
            let vocab = self.data.recall.keys + self.data.recall.values;
            if vocab > self.model.vocab {
                return Err(CliError::Config(format!(
                    "data.recall needs {vocab} tokens but model.vocab = {}",
                    self.model.vocab
                )));
            }
        }
        if self.eval.sequences == 0 {
            return Err(CliError::Config("eval.sequences must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        ExperimentConfig::default().validate().unwrap();
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(ExperimentConfig::parse("[model]\nwidth = 3\n").is_err());
        assert!(ExperimentConfig::parse("bogus = 1\n").is_err());
    }

    #[test]
    fn toml_round_trip() {
        let cfg = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::parse(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn invalid_memory_is_reported() {
        let cfg = ExperimentConfig::parse("[memory]\ntop_k = 100\n").unwrap();
        assert!(cfg.validate().is_err());
    }
}
