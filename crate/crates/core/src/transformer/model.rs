use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{MemoryBlock, MemoryCache, MemoryForward, NormMode};
use crate::memory::{RetrievalPath, ValueCache};
use crate::numerics::{matmul, matmul_nt, matmul_tn, rms_norm, rms_norm_backward, Rng, Scalar, Tensor};
use crate::params::{join, ParamTree};
use crate::train::scatter::ScatterStats;

use super::block::{BlockCache, TransformerBlockParams, NORM_EPS};

/// Backbone hyperparameters shared by every block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDims {
    pub vocab: usize,
    pub d: usize,
    pub heads: usize,
    pub d_ff: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims {
            vocab: 256,
            d: 64,
            heads: 4,
            d_ff: 256,
        }
    }
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        if self.vocab == 0 || self.d == 0 || self.heads == 0 || self.d_ff == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if !self.d.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "model width {} is not divisible by {} heads",
                self.d, self.heads
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Block<T> {
    Transformer(TransformerBlockParams<T>),
    Memory(MemoryBlock<T>),
}

impl<T: Scalar> Block<T> {
    /// `transformer` or `memory:<kind>`.
    pub fn label(&self) -> String {
        match self {
            Block::Transformer(_) => "transformer".into(),
            Block::Memory(m) => format!("memory:{}", m.kind.kind),
        }
    }

    pub fn is_memory(&self) -> bool {
        matches!(self, Block::Memory(_))
    }
}

impl<T: Scalar> ParamTree<T> for Block<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        match self {
            Block::Transformer(b) => b.visit(prefix, out),
            Block::Memory(b) => b.visit(prefix, out),
        }
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        match self {
            Block::Transformer(b) => b.visit_mut(prefix, out),
            Block::Memory(b) => b.visit_mut(prefix, out),
        }
    }
}

/// Decoder: `embed → blocks → rms → unembed`.
///
/// `trainable[i]` marks block `i` for gradient updates; `io_trainable` covers
/// the embedding, final norm and unembedding.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub dims: ModelDims,
    pub embed: Tensor<T>,
    pub blocks: Vec<Block<T>>,
    pub final_norm: Tensor<T>,
    pub unembed: Tensor<T>,
    pub trainable: Vec<bool>,
    /// Blocks added by up-scaling, as opposed to base blocks.
    pub inserted: Vec<bool>,
    pub io_trainable: bool,
    pub retrieval: RetrievalPath,
}

/// Multiplies one attention head's output by a constant during forward.
#[derive(Clone, Copy, Debug)]
pub struct HeadScale<T> {
    pub block: usize,
    pub head: usize,
    pub scale: T,
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardOptions<'a, T> {
    pub mode: NormMode,
    pub value_caches: Option<&'a [Option<ValueCache<T>>]>,
    pub head_scale: Option<HeadScale<T>>,
}

impl<T> Default for ForwardOptions<'_, T> {
    fn default() -> Self {
        ForwardOptions {
            mode: NormMode::Eval,
            value_caches: None,
            head_scale: None,
        }
    }
}

impl<T> ForwardOptions<'_, T> {
    pub fn train() -> Self {
        ForwardOptions {
            mode: NormMode::Train,
            value_caches: None,
            head_scale: None,
        }
    }
}

#[derive(Clone, Debug)]
enum StageCache<T> {
    Transformer(BlockCache<T>),
    Memory(MemoryCache<T>),
}

#[derive(Clone, Debug)]
pub struct ModelCache<T> {
    tokens: Vec<usize>,
    stages: Vec<StageCache<T>>,
    pre_final: Tensor<T>,
    final_inv: Vec<T>,
    final_out: Tensor<T>,
}

impl<T> ModelCache<T> {
    /// Concatenated attention head outputs of block `i` when it is a
    /// transformer block.
    pub fn heads_out(&self, i: usize) -> Option<&Tensor<T>> {
        match self.stages.get(i)? {
            StageCache::Transformer(c) => Some(&c.attn.heads_out),
            StageCache::Memory(_) => None,
        }
    }

    /// Retrieved slot indices of every memory block, in block order.
    pub fn retrieved_indices(&self) -> Vec<&[usize]> {
        self.stages
            .iter()
            .filter_map(|s| match s {
                StageCache::Memory(m) => Some(m.retrieval.indices.as_slice()),
                _ => None,
            })
            .collect()
    }
}

#[derive(Clone, Debug, Default)]
pub struct BackwardOutput<T> {
    /// Gradient at each transformer block's concatenated head outputs, when
    /// requested.
    pub d_heads: Vec<Option<Tensor<T>>>,
    pub scatter: ScatterStats,
}

impl<T: Scalar> Model<T> {
    /// Randomly initialized base model of `layers` transformer blocks, fully
    /// trainable.
    pub fn base(dims: ModelDims, layers: usize, rng: &mut Rng) -> Result<Self> {
        dims.validate()?;
        let (v, d) = (dims.vocab, dims.d);
        let embed = rng.normal_tensor(&[v, d], 1.0);
        let blocks = (0..layers)
            .map(|_| Block::Transformer(TransformerBlockParams::random(d, dims.heads, dims.d_ff, rng)))
            .collect();
        let unembed = rng.normal_tensor(&[d, v], 1.0 / (d as f64).sqrt());
        Ok(Model {
            dims,
            embed,
            blocks,
            final_norm: Tensor::ones(&[d]),
            unembed,
            trainable: vec![true; layers],
            inserted: vec![false; layers],
            io_trainable: true,
            retrieval: RetrievalPath::default(),
        })
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    pub fn labels(&self) -> Vec<String> {
        self.blocks.iter().map(Block::label).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        let (v, d) = (self.dims.vocab, self.dims.d);
        if self.embed.shape() != [v, d] || self.unembed.shape() != [d, v] || self.final_norm.shape() != [d] {
            return Err(Error::Config("embedding shapes do not match model dimensions".into()));
        }
        if self.inserted.len() != self.blocks.len() {
            return Err(Error::Config(format!(
                "inserted mask has {} entries for {} blocks",
                self.inserted.len(),
                self.blocks.len()
            )));
        }
        if self.trainable.len() != self.blocks.len() {
            return Err(Error::Config(format!(
                "trainable mask has {} entries for {} blocks",
                self.trainable.len(),
                self.blocks.len()
            )));
        }
        for b in &self.blocks {
            match b {
                Block::Transformer(t) => {
                    t.attn.validate()?;
                    if t.attn.dim() != d {
                        return Err(Error::Config("transformer block width mismatch".into()));
                    }
                }
                Block::Memory(m) => {
                    m.validate()?;
                    if m.cfg.model_dim() != d {
                        return Err(Error::Config("memory block width mismatch".into()));
                    }
                }
            }
        }
        Ok(())
    }

    /// Eval-mode logits `[s × vocab]`.
    pub fn forward(&self, tokens: &[usize]) -> Result<Tensor<T>> {
        Ok(self.forward_with(tokens, &ForwardOptions::default())?.0)
    }

    pub fn forward_with(&self, tokens: &[usize], opts: &ForwardOptions<'_, T>) -> Result<(Tensor<T>, ModelCache<T>)> {
        let (v, d) = (self.dims.vocab, self.dims.d);
        if tokens.is_empty() {
            return Err(Error::InvalidArgument("empty token sequence".into()));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= v) {
            return Err(Error::IndexOutOfRange {
                what: "token",
                index: bad,
                size: v,
            });
        }
        let mut x = Tensor::zeros(&[tokens.len(), d]);
        for (r, &t) in tokens.iter().enumerate() {
            x.row_mut(r).copy_from_slice(self.embed.row(t));
        }
        let mut stages = Vec::with_capacity(self.blocks.len());
        for (i, block) in self.blocks.iter().enumerate() {
            let (y, c) = match block {
                Block::Transformer(b) => {
                    let hs = opts
                        .head_scale
                        .filter(|s| s.block == i)
                        .map(|s| (s.head, s.scale));
                    let (y, c) = b.forward_cached(&x, hs)?;
                    (y, StageCache::Transformer(c))
                }
                Block::Memory(m) => {
                    let mf = MemoryForward {
                        mode: opts.mode,
                        path: self.retrieval,
                        value_cache: opts.value_caches.and_then(|vc| vc.get(i)).and_then(Option::as_ref),
                    };
                    let (y, c) = m.forward_cached(&x, mf)?;
                    (y, StageCache::Memory(c))
                }
            };
            stages.push(c);
            x = y;
        }
        let (final_out, final_inv) = rms_norm(&x, &self.final_norm, NORM_EPS)?;
        let logits = matmul(&final_out, &self.unembed)?;
        logits.ensure_finite("model_forward")?;
        Ok((
            logits,
            ModelCache {
                tokens: tokens.to_vec(),
                stages,
                pre_final: x,
                final_inv,
                final_out,
            },
        ))
    }

    /// Lowest block index the backward pass must reach.
    fn backward_floor(&self, want_heads: bool, has_grads: bool) -> Option<usize> {
        if want_heads || (has_grads && self.io_trainable) {
            return Some(0);
        }
        if !has_grads {
            return None;
        }
        self.trainable.iter().position(|&t| t)
    }

    /// Backpropagates `dlogits`. Parameter gradients of trainable parts are
    /// accumulated into `grads` (a structural mirror of `self`); frozen parts
    /// receive nothing. With `want_heads`, propagates through every block and
    /// records the gradient at each transformer block's head outputs.
    pub fn backward(
        &self,
        cache: &ModelCache<T>,
        dlogits: &Tensor<T>,
        grads: Option<&mut Model<T>>,
        want_heads: bool,
    ) -> Result<BackwardOutput<T>> {
        let mut out = BackwardOutput {
            d_heads: vec![None; self.blocks.len()],
            scatter: ScatterStats::default(),
        };
        let mut grads = grads;
        let io = self.io_trainable;
        if let Some(g) = grads.as_deref_mut().filter(|_| io) {
            g.unembed.add_assign(&matmul_tn(&cache.final_out, dlogits)?)?;
        }
        let Some(floor) = self.backward_floor(want_heads, grads.is_some()) else {
            return Ok(out);
        };
        let dfinal = matmul_nt(dlogits, &self.unembed)?;
        let mut dx = rms_norm_backward(
            &cache.pre_final,
            &self.final_norm,
            &cache.final_inv,
            &dfinal,
            grads.as_deref_mut().filter(|_| io).map(|g| &mut g.final_norm),
        );
        for i in (floor..self.blocks.len()).rev() {
            let train_here = self.trainable[i];
            let gblock = grads
                .as_deref_mut()
                .filter(|_| train_here)
                .map(|g| &mut g.blocks[i]);
            dx = match (&self.blocks[i], &cache.stages[i]) {
                (Block::Transformer(b), StageCache::Transformer(c)) => {
                    let gb = gblock.map(|g| match g {
                        Block::Transformer(t) => t,
                        _ => unreachable!("gradient model mirrors parameters"),
                    });
                    let (dxi, dh) = b.backward(c, &dx, gb)?;
                    if want_heads {
                        out.d_heads[i] = Some(dh);
                    }
                    dxi
                }
                (Block::Memory(m), StageCache::Memory(c)) => {
                    let gb = gblock.map(|g| match g {
                        Block::Memory(t) => t,
                        _ => unreachable!("gradient model mirrors parameters"),
                    });
                    let (dxi, stats) = m.backward(c, &dx, gb)?;
                    out.scatter += stats;
                    dxi
                }
                _ => return Err(Error::InvalidArgument("cache does not match model".into())),
            };
        }
        if let Some(g) = grads.filter(|_| io && floor == 0) {
            for (r, &t) in cache.tokens.iter().enumerate() {
                for (a, &b) in g.embed.row_mut(t).iter_mut().zip(dx.row(r)) {
                    *a += b;
                }
            }
        }
        Ok(out)
    }

    /// Folds the batch statistics recorded in `cache` into every query
    /// batch-norm's running averages.
    pub fn update_running_stats(&mut self, cache: &ModelCache<T>) {
        for (b, s) in self.blocks.iter_mut().zip(&cache.stages) {
            if let (Block::Memory(m), StageCache::Memory(c)) = (b, s) {
                if let (Some(bn), Some(bc)) = (m.bn.as_mut(), c.bn_cache()) {
                    bn.update_running(bc);
                }
            }
        }
    }

    /// Materialized value tables for every HML block (`None` elsewhere).
    pub fn value_caches(&self) -> Result<Vec<Option<ValueCache<T>>>> {
        self.blocks
            .iter()
            .map(|b| match b {
                Block::Memory(m) => m.value_cache(),
                Block::Transformer(_) => Ok(None),
            })
            .collect()
    }

    /// Non-trainable state tensors (batch-norm running statistics).
    pub fn buffers(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            if let Block::Memory(MemoryBlock { bn: Some(bn), .. }) = b {
                let p = format!("blocks.{i}.bn");
                out.push((join(&p, "running_mean"), &bn.running_mean));
                out.push((join(&p, "running_var"), &bn.running_var));
            }
        }
        out
    }

    pub fn buffers_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter_mut().enumerate() {
            if let Block::Memory(MemoryBlock { bn: Some(bn), .. }) = b {
                let p = format!("blocks.{i}.bn");
                out.push((join(&p, "running_mean"), &mut bn.running_mean));
                out.push((join(&p, "running_var"), &mut bn.running_var));
            }
        }
        out
    }

    /// Number of parameters in blocks marked trainable, plus embeddings when
    /// `io_trainable`.
    pub fn trainable_param_count(&self) -> usize {
        let blocks: usize = self
            .blocks
            .iter()
            .zip(&self.trainable)
            .filter(|(_, &t)| t)
            .map(|(b, _)| b.param_count())
            .sum();
        let io = if self.io_trainable {
            self.embed.len() + self.final_norm.len() + self.unembed.len()
        } else {
            0
        };
        blocks + io
    }

    /// Whether the named parameter receives updates.
    pub fn is_trainable(&self, name: &str) -> bool {
        match block_index(name) {
            Some(i) => self.trainable.get(i).copied().unwrap_or(false),
            None => self.io_trainable,
        }
    }
}

/// Block index of a parameter name of the form `blocks.<i>.…`.
pub fn block_index(name: &str) -> Option<usize> {
    let rest = name.strip_prefix("blocks.")?;
    rest.split('.').next()?.parse().ok()
}

impl<T: Scalar> ParamTree<T> for Model<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        out.push((join(prefix, "embed"), &self.embed));
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("blocks.{i}")), out);
        }
        out.push((join(prefix, "final_norm"), &self.final_norm));
        out.push((join(prefix, "unembed"), &self.unembed));
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        out.push((join(prefix, "embed"), &mut self.embed));
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("blocks.{i}")), out);
        }
        out.push((join(prefix, "final_norm"), &mut self.final_norm));
        out.push((join(prefix, "unembed"), &mut self.unembed));
    }
}

/// Eval-mode logits; same as [`Model::forward`].
pub fn model_forward<T: Scalar>(tokens: &[usize], model: &Model<T>) -> Result<Tensor<T>> {
    model.forward(tokens)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(layers: usize) -> Model<f64> {
        let dims = ModelDims {
            vocab: 11,
            d: 8,
            heads: 2,
            d_ff: 16,
        };
        Model::base(dims, layers, &mut Rng::new(7)).unwrap()
    }

    #[test]
    fn zero_blocks_is_embed_unembed() {
        let m = tiny(0);
        let logits = m.forward(&[3, 1]).unwrap();
        let mut x = Tensor::zeros(&[2, 8]);
        x.row_mut(0).copy_from_slice(m.embed.row(3));
        x.row_mut(1).copy_from_slice(m.embed.row(1));
        let (h, _) = rms_norm(&x, &m.final_norm, NORM_EPS).unwrap();
        assert_eq!(logits, matmul(&h, &m.unembed).unwrap());
    }

    #[test]
    fn two_blocks_match_manual_trace() {
        let m = tiny(2);
        let tokens = [4, 0, 9];
        let mut x = Tensor::zeros(&[3, 8]);
        for (r, &t) in tokens.iter().enumerate() {
            x.row_mut(r).copy_from_slice(m.embed.row(t));
        }
        for b in &m.blocks {
            let Block::Transformer(t) = b else { unreachable!() };
            x = t.forward(&x).unwrap();
        }
        let (h, _) = rms_norm(&x, &m.final_norm, NORM_EPS).unwrap();
        assert_eq!(m.forward(&tokens).unwrap(), matmul(&h, &m.unembed).unwrap());
    }

    #[test]
    fn logits_are_causal() {
        let m = tiny(2);
        let a = m.forward(&[1, 2, 3, 4]).unwrap();
        let b = m.forward(&[1, 2, 3, 10]).unwrap();
        for r in 0..3 {
            assert_eq!(a.row(r), b.row(r));
        }
    }

    #[test]
    fn rejects_out_of_vocab_tokens() {
        assert!(tiny(1).forward(&[11]).is_err());
    }

    #[test]
    fn block_index_parsing() {
        assert_eq!(block_index("blocks.12.attn.w_q"), Some(12));
        assert_eq!(block_index("embed"), None);
    }
}
