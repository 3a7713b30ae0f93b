//! Backward kernels for weighted gathers from an indexable value table.
//!
//! A forward gather computes `out[b] = Σ_κ w[b,κ] · table[idx[b,κ]]`. Its
//! table gradient is a scatter-add in which many `(b, κ)` pairs may hit the
//! same row. [`dedup_scatter_backward`] resolves those collisions before
//! touching the table: it expands per-contribution gradients, deduplicates
//! the indices, pre-aggregates locally per unique index, and then performs a
//! single write per touched row.

use crate::error::{shape_err, Error, Result};
use crate::numerics::{dot, Scalar, Tensor};

/// Bookkeeping from one deduplicated scatter.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ScatterStats {
    /// `B·K` gathered contributions.
    pub contributions: usize,
    /// Distinct table rows referenced.
    pub unique: usize,
    /// Row updates issued against the table.
    pub global_writes: usize,
}

impl std::ops::AddAssign for ScatterStats {
    fn add_assign(&mut self, o: ScatterStats) {
        self.contributions += o.contributions;
        self.unique += o.unique;
        self.global_writes += o.global_writes;
    }
}

fn check_inputs<T: Scalar>(
    g_out: &Tensor<T>,
    idx: &[usize],
    weights: &[T],
    table_rows: usize,
) -> Result<usize> {
    let b = g_out.rows();
    if b == 0 {
        return Ok(0);
    }
    if !idx.len().is_multiple_of(b) || idx.len() != weights.len() {
        return Err(shape_err(
            "scatter backward",
            format!("{b} rows with {} indices and {} weights", idx.len(), weights.len()),
        ));
    }
    if let Some(&bad) = idx.iter().find(|&&i| i >= table_rows) {
        return Err(Error::IndexOutOfRange {
            what: "value table",
            index: bad,
            size: table_rows,
        });
    }
    Ok(idx.len() / b)
}

/// Table gradient `grad[v] = Σ_{idx[b,κ] = v} w[b,κ] · g_out[b]` for a fresh
/// `[table_rows × D]` table.
///
/// `idx` and `weights` are `[B × K]` row-major; `g_out` is `[B × D]`.
pub fn dedup_scatter_backward<T: Scalar>(
    g_out: &Tensor<T>,
    idx: &[usize],
    weights: &[T],
    table_rows: usize,
) -> Result<(Tensor<T>, ScatterStats)> {
    let mut table = Tensor::zeros(&[table_rows, g_out.cols()]);
    let stats = dedup_scatter_accumulate(&mut table, g_out, idx, weights)?;
    Ok((table, stats))
}

/// Same algorithm as [`dedup_scatter_backward`], adding into an existing
/// gradient table.
pub fn dedup_scatter_accumulate<T: Scalar>(
    table: &mut Tensor<T>,
    g_out: &Tensor<T>,
    idx: &[usize],
    weights: &[T],
) -> Result<ScatterStats> {
    let d = g_out.cols();
    if table.cols() != d {
        return Err(shape_err(
            "scatter backward",
            format!("table width {} vs gradient width {d}", table.cols()),
        ));
    }
    let k = check_inputs(g_out, idx, weights, table.rows())?;
    if k == 0 {
        return Ok(ScatterStats::default());
    }

    // Step 1: broadcast each output gradient to its K contributions.
    let bk = idx.len();
    let mut g_token = vec![T::zero(); bk * d];
    for (pos, &w) in weights.iter().enumerate() {
        let src = g_out.row(pos / k);
        let dst = &mut g_token[pos * d..(pos + 1) * d];
        for (t, &g) in dst.iter_mut().zip(src) {
            *t = w * g;
        }
    }

    // Step 2: unique indices and the inverse map.
    let mut uniq: Vec<usize> = idx.to_vec();
    uniq.sort_unstable();
    uniq.dedup();
    let inverse: Vec<usize> = idx
        .iter()
        .map(|v| uniq.binary_search(v).expect("index present"))
        .collect();

    // Step 3: local reduction per unique index, in contribution order.
    let mut g_agg = vec![T::zero(); uniq.len() * d];
    for (pos, &u) in inverse.iter().enumerate() {
        let src = &g_token[pos * d..(pos + 1) * d];
        let dst = &mut g_agg[u * d..(u + 1) * d];
        for (a, &g) in dst.iter_mut().zip(src) {
            *a += g;
        }
    }

    // Step 4: one update per touched row.
    for (u, &v) in uniq.iter().enumerate() {
        let dst = table.row_mut(v);
        for (t, &g) in dst.iter_mut().zip(&g_agg[u * d..(u + 1) * d]) {
            *t += g;
        }
    }

    Ok(ScatterStats {
        contributions: bk,
        unique: uniq.len(),
        global_writes: uniq.len(),
    })
}

/// Gradient of the gather with respect to its per-sample weights:
/// `grad_w[b,κ] = ⟨g_out[b], table[idx[b,κ]]⟩`.
pub fn weight_grad_backward<T: Scalar>(
    g_out: &Tensor<T>,
    idx: &[usize],
    table: &Tensor<T>,
) -> Result<Vec<T>> {
    if table.cols() != g_out.cols() {
        return Err(shape_err(
            "weight_grad_backward",
            format!("table width {} vs gradient width {}", table.cols(), g_out.cols()),
        ));
    }
    let placeholder = vec![T::zero(); idx.len()];
    let k = check_inputs(g_out, idx, &placeholder, table.rows())?;
    if k == 0 {
        return Ok(Vec::new());
    }
    Ok(idx
        .iter()
        .enumerate()
        .map(|(pos, &v)| dot(g_out.row(pos / k), table.row(v)))
        .collect())
}
