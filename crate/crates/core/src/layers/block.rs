use crate::error::{Error, Result};
use crate::memory::{
    build_value_cache, cached_aggregate, hive_backward, hive_forward, MemoryConfig, RetrievalPath,
    RetrievalResult, ValueCache,
};
use crate::numerics::{matmul, matmul_nt, matmul_tn, rms_norm, rms_norm_backward, Rng, Scalar, Tensor};
use crate::params::{join, ParamTree};
use crate::train::scatter::ScatterStats;
use crate::transformer::{AttentionCache, AttentionParams, NORM_EPS};

use super::banks::{selection_softmax_backward, shared_aggregate, shared_backward, MemoryBank};
use super::kind::{LayerKind, MemoryLayerKind};
use super::norm::{layer_norm, layer_norm_backward, BatchNorm, BnCache, NormMode, LN_EPS};

/// `y = x + Mem(Attn'(rms(x)))`: a transformer block whose feed-forward
/// network is replaced by a retrieval layer.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryBlock<T> {
    pub kind: MemoryLayerKind,
    pub cfg: MemoryConfig,
    pub norm: Tensor<T>,
    pub attn: AttentionParams<T>,
    pub bank: MemoryBank<T>,
    /// Present iff the query batch-norm toggle is on.
    pub bn: Option<BatchNorm<T>>,
}

/// Per-call forward options.
#[derive(Clone, Copy, Debug)]
pub struct MemoryForward<'a, T> {
    pub mode: NormMode,
    pub path: RetrievalPath,
    /// Materialized HML value tables; forward only.
    pub value_cache: Option<&'a ValueCache<T>>,
}

impl<T> Default for MemoryForward<'_, T> {
    fn default() -> Self {
        MemoryForward {
            mode: NormMode::Eval,
            path: RetrievalPath::default(),
            value_cache: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct MemoryCache<T> {
    x: Tensor<T>,
    inv_rms: Vec<T>,
    attn: AttentionCache<T>,
    a_prime: Tensor<T>,
    bn: Option<BnCache<T>>,
    ln: Option<(Tensor<T>, Vec<T>)>,
    q: Tensor<T>,
    pub retrieval: RetrievalResult<T>,
    pooled: Option<Tensor<T>>,
}

impl<T> MemoryCache<T> {
    pub(crate) fn bn_cache(&self) -> Option<&BnCache<T>> {
        self.bn.as_ref()
    }
}

impl<T: Scalar> MemoryBlock<T> {
    /// Random attention and keys, zero value table.
    pub fn new(kind: MemoryLayerKind, cfg: MemoryConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.model_dim();
        let block = MemoryBlock {
            kind,
            cfg,
            norm: Tensor::ones(&[d]),
            attn: AttentionParams::random(d, cfg.heads(), kind.toggles.output_projection, rng),
            bank: MemoryBank::new(kind.kind, &cfg, rng),
            bn: kind.toggles.query_batchnorm.then(|| BatchNorm::new(cfg.query_dim())),
        };
        block.validate()?;
        Ok(block)
    }

    pub fn validate(&self) -> Result<()> {
        self.attn.validate()?;
        if self.attn.heads != self.cfg.heads() {
            return Err(Error::Config(format!(
                "memory block attention has {} heads, memory config has {}",
                self.attn.heads,
                self.cfg.heads()
            )));
        }
        if self.bank.kind() != self.kind.kind {
            return Err(Error::Config("memory bank does not match layer kind".into()));
        }
        if self.attn.w_o.is_some() != self.kind.toggles.output_projection {
            return Err(Error::Config("output projection presence does not match toggle".into()));
        }
        if self.bn.is_some() != self.kind.toggles.query_batchnorm {
            return Err(Error::Config("query batch-norm presence does not match toggle".into()));
        }
        Ok(())
    }

    pub fn value_cache(&self) -> Result<Option<ValueCache<T>>> {
        match &self.bank {
            MemoryBank::Hml(b) => Ok(Some(build_value_cache(&b.values)?)),
            _ => Ok(None),
        }
    }

    pub fn forward(&self, x: &Tensor<T>, opts: MemoryForward<'_, T>) -> Result<Tensor<T>> {
        Ok(self.forward_cached(x, opts)?.0)
    }

    pub fn forward_cached(
        &self,
        x: &Tensor<T>,
        opts: MemoryForward<'_, T>,
    ) -> Result<(Tensor<T>, MemoryCache<T>)> {
        let toggles = self.kind.toggles;
        let (h, inv_rms) = rms_norm(x, &self.norm, NORM_EPS)?;
        let (att, attn) = self.attn.forward(&h, toggles.output_projection)?;
        let a_prime = if toggles.internal_residual { x.add(&att)? } else { att };
        let mut q = match self.bank.query_projection() {
            Some(w_q) => matmul(&a_prime, w_q)?,
            None => a_prime.clone(),
        };
        let bn = match &self.bn {
            Some(bn) => {
                let (out, c) = bn.forward(&q, opts.mode)?;
                q = out;
                Some(c)
            }
            None => None,
        };
        let ln = if toggles.query_layernorm {
            let (out, inv) = layer_norm(&q, LN_EPS);
            q = out.clone();
            Some((out, inv))
        } else {
            None
        };
        let retrieval = self.bank.select(&q, self.cfg.top_k(), opts.path)?;
        let (m, pooled) = match (&self.bank, opts.value_cache) {
            (MemoryBank::Hml(_), Some(cache)) => (cached_aggregate(&retrieval, cache)?, None),
            (MemoryBank::Hml(b), None) => {
                let (m, p) = hive_forward(&retrieval, &b.values)?;
                (m, Some(p))
            }
            (MemoryBank::Linear(b), _) => (shared_aggregate(&retrieval, &b.values)?, None),
            (MemoryBank::Pkm(b), _) => (shared_aggregate(&retrieval, &b.values)?, None),
        };
        let y = x.add(&m)?;
        y.ensure_finite("memory_block")?;
        let cache = MemoryCache {
            x: x.clone(),
            inv_rms,
            attn,
            a_prime,
            bn,
            ln,
            q,
            retrieval,
            pooled,
        };
        Ok((y, cache))
    }

    /// Backward pass; returns `dx` and scatter statistics of the value-table
    /// update.
    pub fn backward(
        &self,
        cache: &MemoryCache<T>,
        dy: &Tensor<T>,
        grads: Option<&mut MemoryBlock<T>>,
    ) -> Result<(Tensor<T>, ScatterStats)> {
        let toggles = self.kind.toggles;
        let res = &cache.retrieval;
        let mut grads = grads;
        let (dweights, stats) = match &self.bank {
            MemoryBank::Hml(b) => {
                let pooled = cache
                    .pooled
                    .as_ref()
                    .ok_or_else(|| Error::InvalidArgument("backward through a value-cache forward".into()))?;
                let dv = grads.as_deref_mut().map(|g| match &mut g.bank {
                    MemoryBank::Hml(gb) => &mut gb.values,
                    _ => unreachable!("gradient bank kind mirrors parameters"),
                });
                hive_backward(res, &b.values, pooled, dy, dv)?
            }
            MemoryBank::Linear(b) => {
                let dv = grads.as_deref_mut().map(|g| match &mut g.bank {
                    MemoryBank::Linear(gb) => &mut gb.values,
                    _ => unreachable!("gradient bank kind mirrors parameters"),
                });
                shared_backward(res, &b.values, dy, dv)?
            }
            MemoryBank::Pkm(b) => {
                let dv = grads.as_deref_mut().map(|g| match &mut g.bank {
                    MemoryBank::Pkm(gb) => &mut gb.values,
                    _ => unreachable!("gradient bank kind mirrors parameters"),
                });
                shared_backward(res, &b.values, dy, dv)?
            }
        };
        let dscore = selection_softmax_backward(res, &dweights);
        let mut dq = self
            .bank
            .select_backward(&cache.q, res, &dscore, grads.as_deref_mut().map(|g| &mut g.bank))?;
        if let Some((xhat, inv)) = &cache.ln {
            dq = layer_norm_backward(xhat, inv, &dq);
        }
        if let (Some(bn), Some(bc)) = (&self.bn, &cache.bn) {
            dq = bn.backward(bc, &dq);
        }
        let da = match self.bank.query_projection() {
            Some(w_q) => {
                if let Some(g) = grads.as_deref_mut() {
                    let gw = match &mut g.bank {
                        MemoryBank::Linear(gb) => &mut gb.w_q,
                        MemoryBank::Pkm(gb) => &mut gb.w_q,
                        MemoryBank::Hml(_) => unreachable!("HML has no query projection"),
                    };
                    gw.add_assign(&matmul_tn(&cache.a_prime, &dq)?)?;
                }
                matmul_nt(&dq, w_q)?
            }
            None => dq,
        };
        let mut dx = dy.clone();
        if toggles.internal_residual {
            dx.add_assign(&da)?;
        }
        let (dh, _) = self
            .attn
            .backward(&cache.attn, &da, grads.as_deref_mut().map(|g| &mut g.attn))?;
        let dxn = rms_norm_backward(&cache.x, &self.norm, &cache.inv_rms, &dh, grads.map(|g| &mut g.norm));
        dx.add_assign(&dxn)?;
        Ok((dx, stats))
    }
}

impl<T: Scalar> ParamTree<T> for MemoryBlock<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        out.push((join(prefix, "norm"), &self.norm));
        self.attn.visit(&join(prefix, "attn"), out);
        self.bank.visit(&join(prefix, "mem"), out);
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        out.push((join(prefix, "norm"), &mut self.norm));
        self.attn.visit_mut(&join(prefix, "attn"), out);
        self.bank.visit_mut(&join(prefix, "mem"), out);
    }
}

/// Full HML Memory block forward, optionally through a value cache.
pub fn hml_block_forward<T: Scalar>(
    x: &Tensor<T>,
    block: &MemoryBlock<T>,
    cache: Option<&ValueCache<T>>,
) -> Result<Tensor<T>> {
    if block.kind.kind != LayerKind::Hml {
        return Err(Error::InvalidArgument(format!(
            "hml_block_forward on a {} block",
            block.kind.kind
        )));
    }
    block.validate()?;
    block.forward(
        x,
        MemoryForward {
            value_cache: cache,
            ..MemoryForward::default()
        },
    )
}
