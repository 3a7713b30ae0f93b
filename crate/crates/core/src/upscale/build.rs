use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{MemoryBlock, MemoryLayerKind};
use crate::memory::MemoryConfig;
use crate::numerics::{Rng, Scalar};
use crate::params::ParamTree;
use crate::transformer::{Block, Model, TransformerBlockParams};

use super::policy::{policy_indices, PlacementPolicy};

/// Which base block an inserted block is initialized from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitSource {
    Preceding,
    Subsequent,
    AverageAdjacent,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum InsertKind {
    /// Duplicate of a base transformer block.
    TransformerCopy {
        /// Zero `W_o` and `W_down` so the copy starts as an identity map.
        identity_init: bool,
    },
    MemoryBlock {
        layer: MemoryLayerKind,
        memory: MemoryConfig,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UpscalePlan {
    pub policy: PlacementPolicy,
    pub inserts: usize,
    pub insert_kind: InsertKind,
    pub init_source: InitSource,
}

impl UpscalePlan {
    /// Memory blocks at distributed positions, initialized from the
    /// subsequent base block.
    pub fn midus(layer: MemoryLayerKind, memory: MemoryConfig, inserts: usize) -> Self {
        UpscalePlan {
            policy: PlacementPolicy::Distributed,
            inserts,
            insert_kind: InsertKind::MemoryBlock { layer, memory },
            init_source: InitSource::Subsequent,
        }
    }

    /// Identity-initialized transformer copies at Llama Pro positions,
    /// initialized from the preceding base block.
    pub fn dus(inserts: usize) -> Self {
        UpscalePlan {
            policy: PlacementPolicy::LlamaPro,
            inserts,
            insert_kind: InsertKind::TransformerCopy { identity_init: true },
            init_source: InitSource::Preceding,
        }
    }
}

/// Training regime of an expanded model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Only inserted blocks are trainable.
    #[default]
    Cpt,
    /// Everything is trainable.
    Sft,
}

/// Sets trainability flags for `mode`. `inserted` lists the positions of
/// inserted blocks.
pub fn apply_train_mode<T: Scalar>(model: &mut Model<T>, inserted: &[usize], mode: TrainMode) {
    match mode {
        TrainMode::Cpt => {
            model.trainable = (0..model.depth()).map(|i| inserted.contains(&i)).collect();
            model.inserted = model.trainable.clone();
            model.io_trainable = false;
        }
        TrainMode::Sft => {
            model.trainable = vec![true; model.depth()];
            model.io_trainable = true;
        }
    }
}

/// Copy of `block` with `W_o` and `W_down` zeroed, which makes it an
/// identity map.
pub fn zero_init_dus_copy<T: Scalar>(block: &TransformerBlockParams<T>) -> TransformerBlockParams<T> {
    let mut b = block.clone();
    if let Some(w) = b.attn.w_o.as_mut() {
        w.fill(T::zero());
    }
    b.ffn.w_down.fill(T::zero());
    b
}

fn average_blocks<T: Scalar>(
    a: &TransformerBlockParams<T>,
    b: &TransformerBlockParams<T>,
) -> TransformerBlockParams<T> {
    let mut out = a.clone();
    let half = T::from_f64(0.5);
    for ((_, o), (_, y)) in out.named_mut().into_iter().zip(b.named()) {
        for (ov, &yv) in o.data_mut().iter_mut().zip(y.data()) {
            *ov = (*ov + yv) * half;
        }
    }
    out
}

/// Base block (by base index) that seeds the insert at `position`.
fn source_block<T: Scalar>(
    base: &[&TransformerBlockParams<T>],
    preceding: Option<usize>,
    source: InitSource,
    position: usize,
) -> Result<TransformerBlockParams<T>> {
    let following = preceding.map_or(0, |p| p + 1);
    let missing = |what: &str| Error::Config(format!("insert at position {position} has no {what} base block"));
    match source {
        InitSource::Preceding => Ok(base[preceding.ok_or_else(|| missing("preceding"))?].clone()),
        InitSource::Subsequent => base
            .get(following)
            .map(|b| (*b).clone())
            .ok_or_else(|| missing("subsequent")),
        InitSource::AverageAdjacent => {
            let p = preceding.ok_or_else(|| missing("preceding"))?;
            let s = base.get(following).ok_or_else(|| missing("subsequent"))?;
            Ok(average_blocks(base[p], s))
        }
    }
}

/// Shared expansion: walks the expanded positions, emitting base blocks in
/// order and calling `make` for every insert with its seeding block.
fn expand<T: Scalar>(
    base: &Model<T>,
    plan: &UpscalePlan,
    mut make: impl FnMut(TransformerBlockParams<T>) -> Result<Block<T>>,
) -> Result<(Model<T>, Vec<usize>)> {
    base.validate()?;
    let base_blocks: Vec<&TransformerBlockParams<T>> = base
        .blocks
        .iter()
        .map(|b| match b {
            Block::Transformer(t) => Ok(t),
            Block::Memory(_) => Err(Error::Config("up-scaling expects a transformer-only base model".into())),
        })
        .collect::<Result<_>>()?;
    let l = base_blocks.len();
    let positions = policy_indices(plan.policy, l, plan.inserts)?;
    let mut blocks = Vec::with_capacity(l + plan.inserts);
    let mut next_base: usize = 0;
    let mut ins = positions.iter().peekable();
    for pos in 0..l + plan.inserts {
        if ins.peek() == Some(&&pos) {
            ins.next();
            let preceding = next_base.checked_sub(1);
            let src = source_block(&base_blocks, preceding, plan.init_source, pos)?;
            blocks.push(make(src)?);
        } else {
            blocks.push(base.blocks[next_base].clone());
            next_base += 1;
        }
    }
    let mut model = Model {
        inserted: (0..blocks.len()).map(|i| positions.contains(&i)).collect(),
        blocks,
        trainable: Vec::new(),
        ..base.clone()
    };
    apply_train_mode(&mut model, &positions, TrainMode::Cpt);
    model.validate()?;
    Ok((model, positions))
}

/// Depth up-scaling with duplicated transformer blocks. Returns the expanded
/// model (only inserted blocks trainable) and the insert positions.
pub fn build_dus<T: Scalar>(base: &Model<T>, plan: &UpscalePlan) -> Result<(Model<T>, Vec<usize>)> {
    let InsertKind::TransformerCopy { identity_init } = plan.insert_kind else {
        return Err(Error::Config("build_dus needs a transformer_copy plan".into()));
    };
    expand(base, plan, |src| {
        Ok(Block::Transformer(if identity_init { zero_init_dus_copy(&src) } else { src }))
    })
}

/// Depth up-scaling with memory blocks. Each memory block takes its
/// attention and norm gain from the seeding base block (dropping `W_o`
/// unless the output-projection toggle is on); keys and query projections
/// are drawn from `rng` and value tables start at zero.
pub fn build_midus<T: Scalar>(
    base: &Model<T>,
    plan: &UpscalePlan,
    rng: &mut Rng,
) -> Result<(Model<T>, Vec<usize>)> {
    let InsertKind::MemoryBlock { layer, memory } = plan.insert_kind else {
        return Err(Error::Config("build_midus needs a memory_block plan".into()));
    };
    memory.validate()?;
    if memory.model_dim() != base.dims.d || memory.heads() != base.dims.heads {
        return Err(Error::Config(format!(
            "memory config (d={}, H={}) does not match model (d={}, H={})",
            memory.model_dim(),
            memory.heads(),
            base.dims.d,
            base.dims.heads
        )));
    }
    expand(base, plan, |src| {
        let mut block = MemoryBlock::new(layer, memory, rng)?;
        block.attn = if layer.toggles.output_projection {
            src.attn
        } else {
            src.attn.without_output()
        };
        block.norm = src.attn_norm;
        block.bank.zero_values();
        Ok(Block::Memory(block))
    })
}
