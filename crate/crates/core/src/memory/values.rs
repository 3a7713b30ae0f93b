use crate::error::{shape_err, Error, Result};
use crate::numerics::{dot, matmul_nt, Rng, Scalar, Tensor};
use crate::params::{visit_tensors, visit_tensors_mut, ParamTree};
use crate::train::scatter::{dedup_scatter_accumulate, weight_grad_backward, ScatterStats};

use super::config::MemoryConfig;
use super::retrieval::RetrievalResult;

/// Head-wise implicit value expansion: one shared `[N × d_h]` base table and
/// a `[d_h × d_h]` transform per head.
///
/// Head `h` logically owns the table `base · W_hᵀ` without storing it, so
/// the bank costs `N·d_h + H·d_h²` parameters instead of `H·N·d_h`.
#[derive(Clone, Debug, PartialEq)]
pub struct ValueBank<T> {
    pub base: Tensor<T>,
    pub transforms: Tensor<T>,
}

impl<T: Scalar> ValueBank<T> {
    pub fn zeros(cfg: &MemoryConfig) -> Self {
        let dh = cfg.head_dim();
        ValueBank {
            base: Tensor::zeros(&[cfg.slots(), dh]),
            transforms: Tensor::zeros(&[cfg.heads(), dh, dh]),
        }
    }

    /// Initial bank: zero base table, Gaussian transforms with std
    /// `1/sqrt(d_h)`. The zero table makes every retrieval return zero.
    pub fn new(cfg: &MemoryConfig, rng: &mut Rng) -> Self {
        let dh = cfg.head_dim();
        ValueBank {
            base: Tensor::zeros(&[cfg.slots(), dh]),
            transforms: rng.normal_tensor(&[cfg.heads(), dh, dh], 1.0 / (dh as f64).sqrt()),
        }
    }

    pub fn heads(&self) -> usize {
        self.transforms.shape()[0]
    }

    pub fn head_dim(&self) -> usize {
        self.base.cols()
    }

    pub fn slots(&self) -> usize {
        self.base.rows()
    }
}

impl<T: Scalar> ParamTree<T> for ValueBank<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        visit_tensors!(self, prefix, out, [base, transforms]);
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        visit_tensors_mut!(self, prefix, out, [base, transforms]);
    }
}

/// Materialized per-head value tables `base · W_hᵀ`, shape `[H, N, d_h]`.
///
/// Built once for inference; training keeps the factorized form.
#[derive(Clone, Debug, PartialEq)]
pub struct ValueCache<T> {
    pub tables: Tensor<T>,
}

fn check_retrieval<T: Scalar>(res: &RetrievalResult<T>, heads: usize, slots: usize) -> Result<()> {
    if res.heads != heads {
        return Err(shape_err(
            "hive_aggregate",
            format!("retrieval has {} heads, bank has {heads}", res.heads),
        ));
    }
    if let Some(&bad) = res.indices.iter().find(|&&i| i >= slots) {
        return Err(Error::IndexOutOfRange {
            what: "value slot",
            index: bad,
            size: slots,
        });
    }
    Ok(())
}

/// Concatenated head outputs `[s × H·d_h]`: per token and head, the weighted
/// sum of the selected base rows, mapped through that head's transform.
pub fn hive_aggregate<T: Scalar>(res: &RetrievalResult<T>, bank: &ValueBank<T>) -> Result<Tensor<T>> {
    Ok(hive_forward(res, bank)?.0)
}

/// [`hive_aggregate`] that also returns the pooled base values
/// `[s·H × d_h]` (rows in token-major, head-minor order).
pub(crate) fn hive_forward<T: Scalar>(
    res: &RetrievalResult<T>,
    bank: &ValueBank<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (heads, dh) = (bank.heads(), bank.head_dim());
    check_retrieval(res, heads, bank.slots())?;
    let s = res.tokens;
    let mut pooled = Tensor::zeros(&[s * heads, dh]);
    let mut out = Tensor::zeros(&[s, heads * dh]);
    for r in 0..s {
        for h in 0..heads {
            let (idx, w) = res.group(r, h);
            let p = pooled.row_mut(r * heads + h);
            for (&v, &wv) in idx.iter().zip(w) {
                for (acc, &x) in p.iter_mut().zip(bank.base.row(v)) {
                    *acc += wv * x;
                }
            }
            let transform = bank.transforms.outer(h);
            let p = pooled.row(r * heads + h);
            let o = &mut out.row_mut(r)[h * dh..(h + 1) * dh];
            for (i, oi) in o.iter_mut().enumerate() {
                *oi = dot(&transform[i * dh..(i + 1) * dh], p);
            }
        }
    }
    out.ensure_finite("hive_aggregate")?;
    Ok((out, pooled))
}

/// Precomputes `base · W_hᵀ` for every head.
pub fn build_value_cache<T: Scalar>(bank: &ValueBank<T>) -> Result<ValueCache<T>> {
    let (heads, n, dh) = (bank.heads(), bank.slots(), bank.head_dim());
    let mut tables = Tensor::zeros(&[heads, n, dh]);
    for h in 0..heads {
        let t = matmul_nt(&bank.base, &bank.transforms.outer_tensor(h))?;
        tables.outer_mut(h).copy_from_slice(t.data());
    }
    Ok(ValueCache { tables })
}

/// Aggregation through a [`ValueCache`]: weighted sums of cached rows.
pub fn cached_aggregate<T: Scalar>(res: &RetrievalResult<T>, cache: &ValueCache<T>) -> Result<Tensor<T>> {
    let (heads, n, dh) = (
        cache.tables.shape()[0],
        cache.tables.shape()[1],
        cache.tables.shape()[2],
    );
    check_retrieval(res, heads, n)?;
    let mut out = Tensor::zeros(&[res.tokens, heads * dh]);
    for r in 0..res.tokens {
        for h in 0..heads {
            let (idx, w) = res.group(r, h);
            let table = cache.tables.outer(h);
            let o = &mut out.row_mut(r)[h * dh..(h + 1) * dh];
            for (&v, &wv) in idx.iter().zip(w) {
                for (acc, &x) in o.iter_mut().zip(&table[v * dh..(v + 1) * dh]) {
                    *acc += wv * x;
                }
            }
        }
    }
    Ok(out)
}

/// Backward pass of [`hive_aggregate`].
///
/// Returns the gradient with respect to the retrieval weights (`[s·H·k]`,
/// same layout as `res.indices`). When `dbank` is given, accumulates
/// transform gradients and scatters base-table gradients through the
/// deduplicating kernel.
pub(crate) fn hive_backward<T: Scalar>(
    res: &RetrievalResult<T>,
    bank: &ValueBank<T>,
    pooled: &Tensor<T>,
    d_out: &Tensor<T>,
    dbank: Option<&mut ValueBank<T>>,
) -> Result<(Vec<T>, ScatterStats)> {
    let (heads, dh) = (bank.heads(), bank.head_dim());
    let s = res.tokens;
    let mut dpooled = Tensor::zeros(&[s * heads, dh]);
    let mut dbank = dbank;
    for r in 0..s {
        for h in 0..heads {
            let g = &d_out.row(r)[h * dh..(h + 1) * dh];
            let transform = bank.transforms.outer(h);
            let dp = dpooled.row_mut(r * heads + h);
            for (i, &gi) in g.iter().enumerate() {
                for (acc, &w) in dp.iter_mut().zip(&transform[i * dh..(i + 1) * dh]) {
                    *acc += gi * w;
                }
            }
            if let Some(db) = dbank.as_deref_mut() {
                let p = pooled.row(r * heads + h);
                let dt = db.transforms.outer_mut(h);
                for (i, &gi) in g.iter().enumerate() {
                    for (acc, &pj) in dt[i * dh..(i + 1) * dh].iter_mut().zip(p) {
                        *acc += gi * pj;
                    }
                }
            }
        }
    }
    let dweights = weight_grad_backward(&dpooled, &res.indices, &bank.base)?;
    let stats = match dbank {
        Some(db) => dedup_scatter_accumulate(&mut db.base, &dpooled, &res.indices, res.weights.data())?,
        None => ScatterStats::default(),
    };
    Ok((dweights, stats))
}
