use crate::error::{shape_err, Error, Result};
use crate::memory::{
    flat_topk, score_subkeys, score_subkeys_backward, select_product_keys, split_index,
    HeadSelection, MemoryConfig, ProductKeyBank, RetrievalPath, RetrievalResult, ValueBank,
};
use crate::numerics::{matmul, matmul_nt, softmax_backward_slice, Rng, Scalar, Tensor};
use crate::params::{join, ParamTree};
use crate::train::scatter::{dedup_scatter_accumulate, weight_grad_backward, ScatterStats};

use super::kind::LayerKind;

/// Flat memory: per-head key banks scored exhaustively.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearMemoryBank<T> {
    /// `[d × d]` query projection; head `h` reads columns `h·d_h .. (h+1)·d_h`.
    pub w_q: Tensor<T>,
    /// `[H × N × d_h]`.
    pub keys: Tensor<T>,
    /// `[N × d]`, shared by all heads.
    pub values: Tensor<T>,
}

/// Multi-head product-key memory with a shared full-width value table.
#[derive(Clone, Debug, PartialEq)]
pub struct PkmBank<T> {
    pub w_q: Tensor<T>,
    pub keys: ProductKeyBank<T>,
    pub values: Tensor<T>,
}

/// Head-wise memory: product keys queried by head embeddings, factorized
/// values.
#[derive(Clone, Debug, PartialEq)]
pub struct HmlBank<T> {
    pub keys: ProductKeyBank<T>,
    pub values: ValueBank<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum MemoryBank<T> {
    Linear(LinearMemoryBank<T>),
    Pkm(PkmBank<T>),
    Hml(HmlBank<T>),
}

impl<T: Scalar> LinearMemoryBank<T> {
    pub fn new(cfg: &MemoryConfig, rng: &mut Rng) -> Self {
        let (d, dh) = (cfg.model_dim(), cfg.head_dim());
        LinearMemoryBank {
            w_q: rng.normal_tensor(&[d, d], 1.0 / (d as f64).sqrt()),
            keys: rng.normal_tensor(&[cfg.heads(), cfg.slots(), dh], 1.0 / (dh as f64).sqrt()),
            values: Tensor::zeros(&[cfg.slots(), d]),
        }
    }
}

impl<T: Scalar> PkmBank<T> {
    pub fn new(cfg: &MemoryConfig, rng: &mut Rng) -> Self {
        let d = cfg.model_dim();
        PkmBank {
            w_q: rng.normal_tensor(&[d, d], 1.0 / (d as f64).sqrt()),
            keys: ProductKeyBank::random(cfg, rng),
            values: Tensor::zeros(&[cfg.slots(), d]),
        }
    }
}

impl<T: Scalar> HmlBank<T> {
    pub fn new(cfg: &MemoryConfig, rng: &mut Rng) -> Self {
        HmlBank {
            keys: ProductKeyBank::random(cfg, rng),
            values: ValueBank::new(cfg, rng),
        }
    }
}

impl<T: Scalar> MemoryBank<T> {
    pub fn new(kind: LayerKind, cfg: &MemoryConfig, rng: &mut Rng) -> Self {
        match kind {
            LayerKind::Linear => MemoryBank::Linear(LinearMemoryBank::new(cfg, rng)),
            LayerKind::Pkm => MemoryBank::Pkm(PkmBank::new(cfg, rng)),
            LayerKind::Hml => MemoryBank::Hml(HmlBank::new(cfg, rng)),
        }
    }

    pub fn kind(&self) -> LayerKind {
        match self {
            MemoryBank::Linear(_) => LayerKind::Linear,
            MemoryBank::Pkm(_) => LayerKind::Pkm,
            MemoryBank::Hml(_) => LayerKind::Hml,
        }
    }

    pub fn query_projection(&self) -> Option<&Tensor<T>> {
        match self {
            MemoryBank::Linear(b) => Some(&b.w_q),
            MemoryBank::Pkm(b) => Some(&b.w_q),
            MemoryBank::Hml(_) => None,
        }
    }

    /// Zeroes every value parameter read by retrieval.
    pub fn zero_values(&mut self) {
        match self {
            MemoryBank::Linear(b) => b.values.fill(T::zero()),
            MemoryBank::Pkm(b) => b.values.fill(T::zero()),
            MemoryBank::Hml(b) => b.values.base.fill(T::zero()),
        }
    }

    /// Per-head Top-k selection for final queries `q: [s × d]`.
    pub fn select(&self, q: &Tensor<T>, k: usize, path: RetrievalPath) -> Result<RetrievalResult<T>> {
        match self {
            MemoryBank::Linear(b) => select_heads(KeyRef::Flat(&b.keys), q, k, path),
            MemoryBank::Pkm(b) => select_heads(KeyRef::Product(&b.keys), q, k, path),
            MemoryBank::Hml(b) => select_heads(KeyRef::Product(&b.keys), q, k, path),
        }
    }

    pub fn heads(&self) -> usize {
        match self {
            MemoryBank::Linear(b) => b.keys.shape()[0],
            MemoryBank::Pkm(b) => b.keys.heads(),
            MemoryBank::Hml(b) => b.keys.heads(),
        }
    }

    /// Gradient of the selection scores through the keys. `dscore` follows
    /// `res.indices`. Returns `dq`; key gradients go to `grads`.
    pub(crate) fn select_backward(
        &self,
        q: &Tensor<T>,
        res: &RetrievalResult<T>,
        dscore: &[T],
        grads: Option<&mut MemoryBank<T>>,
    ) -> Result<Tensor<T>> {
        let (s, heads, k) = (res.tokens, res.heads, res.k);
        let w = q.cols() / heads;
        let mut dq = Tensor::zeros(q.shape());
        let at = |r: usize, h: usize, kk: usize| (r * heads + h) * k + kk;
        match (self, grads) {
            (MemoryBank::Linear(b), g) => {
                let n_slots = b.keys.shape()[1];
                let mut gkeys = g.map(|g| match g {
                    MemoryBank::Linear(gb) => &mut gb.keys,
                    _ => unreachable!("gradient bank kind mirrors parameters"),
                });
                for r in 0..s {
                    for h in 0..heads {
                        for kk in 0..k {
                            let ds = dscore[at(r, h, kk)];
                            let p = res.indices[at(r, h, kk)];
                            let off = (h * n_slots + p) * w;
                            let key = &b.keys.data()[off..off + w];
                            let dq_row = &mut dq.row_mut(r)[h * w..(h + 1) * w];
                            for (a, &kv) in dq_row.iter_mut().zip(key) {
                                *a += ds * kv;
                            }
                            if let Some(gk) = gkeys.as_deref_mut() {
                                let q_row = &q.row(r)[h * w..(h + 1) * w];
                                for (a, &qv) in gk.data_mut()[off..off + w].iter_mut().zip(q_row) {
                                    *a += ds * qv;
                                }
                            }
                        }
                    }
                }
            }
            (MemoryBank::Pkm(PkmBank { keys, .. }) | MemoryBank::Hml(HmlBank { keys, .. }), g) => {
                let n = keys.sub_keys();
                let mut gkeys = g.map(|g| match g {
                    MemoryBank::Pkm(gb) => &mut gb.keys,
                    MemoryBank::Hml(gb) => &mut gb.keys,
                    _ => unreachable!("gradient bank kind mirrors parameters"),
                });
                for h in 0..heads {
                    let mut d_row = Tensor::zeros(&[s, n]);
                    let mut d_col = Tensor::zeros(&[s, n]);
                    for r in 0..s {
                        for kk in 0..k {
                            let (i, j) = split_index(res.indices[at(r, h, kk)], n);
                            let ds = dscore[at(r, h, kk)];
                            d_row.row_mut(r)[i] += ds;
                            d_col.row_mut(r)[j] += ds;
                        }
                    }
                    let q_h = q.slice_cols(h * w, (h + 1) * w);
                    let dq_h = score_subkeys_backward(&q_h, keys, h, &d_row, &d_col, gkeys.as_deref_mut());
                    dq.add_into_cols(h * w, &dq_h);
                }
            }
        }
        Ok(dq)
    }
}

impl<T: Scalar> ParamTree<T> for MemoryBank<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        match self {
            MemoryBank::Linear(b) => {
                out.push((join(prefix, "w_q"), &b.w_q));
                out.push((join(prefix, "keys"), &b.keys));
                out.push((join(prefix, "values"), &b.values));
            }
            MemoryBank::Pkm(b) => {
                out.push((join(prefix, "w_q"), &b.w_q));
                b.keys.visit(&join(prefix, "keys"), out);
                out.push((join(prefix, "values"), &b.values));
            }
            MemoryBank::Hml(b) => {
                b.keys.visit(&join(prefix, "keys"), out);
                b.values.visit(&join(prefix, "values"), out);
            }
        }
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        match self {
            MemoryBank::Linear(b) => {
                out.push((join(prefix, "w_q"), &mut b.w_q));
                out.push((join(prefix, "keys"), &mut b.keys));
                out.push((join(prefix, "values"), &mut b.values));
            }
            MemoryBank::Pkm(b) => {
                out.push((join(prefix, "w_q"), &mut b.w_q));
                b.keys.visit_mut(&join(prefix, "keys"), out);
                out.push((join(prefix, "values"), &mut b.values));
            }
            MemoryBank::Hml(b) => {
                b.keys.visit_mut(&join(prefix, "keys"), out);
                b.values.visit_mut(&join(prefix, "values"), out);
            }
        }
    }
}

enum KeyRef<'a, T> {
    Flat(&'a Tensor<T>),
    Product(&'a ProductKeyBank<T>),
}

fn select_heads<T: Scalar>(
    keys: KeyRef<'_, T>,
    q: &Tensor<T>,
    k: usize,
    path: RetrievalPath,
) -> Result<RetrievalResult<T>> {
    let heads = match keys {
        KeyRef::Flat(t) => t.shape()[0],
        KeyRef::Product(b) => b.heads(),
    };
    if !q.cols().is_multiple_of(heads) {
        return Err(shape_err("memory retrieval", format!("query width {} for {heads} heads", q.cols())));
    }
    let w = q.cols() / heads;
    let mut sels: Vec<HeadSelection<T>> = Vec::with_capacity(heads);
    for h in 0..heads {
        let q_h = q.slice_cols(h * w, (h + 1) * w);
        let sel = match keys {
            KeyRef::Flat(t) => flat_topk(&matmul_nt(&q_h, &t.outer_tensor(h))?, k)?,
            KeyRef::Product(b) => {
                let (row, col) = score_subkeys(&q_h, b, h)?;
                select_product_keys(&row, &col, k, path)?
            }
        };
        sels.push(sel);
    }
    RetrievalResult::from_heads(&sels)
}

/// Sum over heads of the weighted full-width value rows.
pub(crate) fn shared_aggregate<T: Scalar>(res: &RetrievalResult<T>, values: &Tensor<T>) -> Result<Tensor<T>> {
    let n = values.rows();
    if let Some(&bad) = res.indices.iter().find(|&&i| i >= n) {
        return Err(Error::IndexOutOfRange {
            what: "value slot",
            index: bad,
            size: n,
        });
    }
    let mut out = Tensor::zeros(&[res.tokens, values.cols()]);
    for r in 0..res.tokens {
        for h in 0..res.heads {
            let (idx, w) = res.group(r, h);
            let o = out.row_mut(r);
            for (&v, &wv) in idx.iter().zip(w) {
                for (acc, &x) in o.iter_mut().zip(values.row(v)) {
                    *acc += wv * x;
                }
            }
        }
    }
    out.ensure_finite("memory aggregate")?;
    Ok(out)
}

/// Backward of [`shared_aggregate`]: returns retrieval-weight gradients and
/// scatters value gradients into `dvalues`.
pub(crate) fn shared_backward<T: Scalar>(
    res: &RetrievalResult<T>,
    values: &Tensor<T>,
    dm: &Tensor<T>,
    dvalues: Option<&mut Tensor<T>>,
) -> Result<(Vec<T>, ScatterStats)> {
    let d = dm.cols();
    let mut g = Tensor::zeros(&[res.tokens * res.heads, d]);
    for r in 0..res.tokens {
        for h in 0..res.heads {
            g.row_mut(r * res.heads + h).copy_from_slice(dm.row(r));
        }
    }
    let dweights = weight_grad_backward(&g, &res.indices, values)?;
    let stats = match dvalues {
        Some(dv) => dedup_scatter_accumulate(dv, &g, &res.indices, res.weights.data())?,
        None => ScatterStats::default(),
    };
    Ok((dweights, stats))
}

/// Softmax backward within each `(token, head)` group of selected scores.
pub(crate) fn selection_softmax_backward<T: Scalar>(res: &RetrievalResult<T>, dweights: &[T]) -> Vec<T> {
    let k = res.k;
    let mut out = vec![T::zero(); dweights.len()];
    for ((p, dp), dz) in res
        .weights
        .data()
        .chunks(k)
        .zip(dweights.chunks(k))
        .zip(out.chunks_mut(k))
    {
        softmax_backward_slice(p, dp, dz);
    }
    out
}

fn check_query_input<T: Scalar>(a: &Tensor<T>, w_q: &Tensor<T>, op: &'static str) -> Result<()> {
    if a.shape().len() != 2 || a.cols() != w_q.shape()[0] {
        return Err(shape_err(op, format!("input {:?}, W_q {:?}", a.shape(), w_q.shape())));
    }
    Ok(())
}

fn apply_query_norm<T: Scalar>(
    q: Tensor<T>,
    norm: Option<(&super::norm::BatchNorm<T>, super::norm::NormMode)>,
) -> Result<Tensor<T>> {
    match norm {
        Some((bn, mode)) => super::norm::batchnorm_query(&q, bn, mode),
        None => Ok(q),
    }
}

/// Flat memory layer: `q = a·W_q` (optionally batch-normalized), per-head
/// exhaustive scoring against `N` keys, Top-k, softmax over the selected
/// scores, and the head-summed weighted value rows.
pub fn linear_memory_forward<T: Scalar>(
    a: &Tensor<T>,
    bank: &LinearMemoryBank<T>,
    k: usize,
    query_norm: Option<(&super::norm::BatchNorm<T>, super::norm::NormMode)>,
) -> Result<Tensor<T>> {
    check_query_input(a, &bank.w_q, "linear_memory_forward")?;
    let n = bank.values.rows();
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!("top-k {k} outside 1..={n}")));
    }
    let q = apply_query_norm(matmul(a, &bank.w_q)?, query_norm)?;
    let res = select_heads(KeyRef::Flat(&bank.keys), &q, k, RetrievalPath::TwoStage)?;
    shared_aggregate(&res, &bank.values)
}

/// Multi-head product-key memory layer with shared full-width values.
pub fn pkm_memory_forward<T: Scalar>(
    a: &Tensor<T>,
    bank: &PkmBank<T>,
    k: usize,
    path: RetrievalPath,
    query_norm: Option<(&super::norm::BatchNorm<T>, super::norm::NormMode)>,
) -> Result<Tensor<T>> {
    check_query_input(a, &bank.w_q, "pkm_memory_forward")?;
    let q = apply_query_norm(matmul(a, &bank.w_q)?, query_norm)?;
    let res = select_heads(KeyRef::Product(&bank.keys), &q, k, path)?;
    shared_aggregate(&res, &bank.values)
}
