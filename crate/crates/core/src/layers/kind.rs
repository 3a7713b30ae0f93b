use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Linear,
    Pkm,
    Hml,
}

impl LayerKind {
    pub const ALL: [LayerKind; 3] = [LayerKind::Linear, LayerKind::Pkm, LayerKind::Hml];

    pub fn as_str(self) -> &'static str {
        match self {
            LayerKind::Linear => "linear",
            LayerKind::Pkm => "pkm",
            LayerKind::Hml => "hml",
        }
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LayerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self, Error> {
        LayerKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Unknown {
                what: "memory layer kind",
                name: s.to_string(),
            })
    }
}

/// Optional stages of the memory-block query pipeline.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Toggles {
    pub query_batchnorm: bool,
    pub query_layernorm: bool,
    /// Query from `x + Attn'(·)` instead of `Attn'(·)`.
    pub internal_residual: bool,
    /// Keep the attention output projection.
    pub output_projection: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemoryLayerKind {
    pub kind: LayerKind,
    pub toggles: Toggles,
}

impl MemoryLayerKind {
    /// Default toggles: batch-normalized queries for Linear and PKM, the bare
    /// pipeline for HML.
    pub fn new(kind: LayerKind) -> Self {
        let toggles = Toggles {
            query_batchnorm: kind != LayerKind::Hml,
            ..Toggles::default()
        };
        MemoryLayerKind { kind, toggles }
    }

    pub fn with_toggles(kind: LayerKind, toggles: Toggles) -> Self {
        MemoryLayerKind { kind, toggles }
    }
}
