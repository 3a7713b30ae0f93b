use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::numerics::{select_top, softmax_in_place, topk, Scalar, Tensor};

/// 0-based composite key index `π(i, j) = i·n + j`.
pub fn flat_index(i: usize, j: usize, n: usize) -> Result<usize> {
    if i >= n {
        return Err(Error::IndexOutOfRange {
            what: "row sub-key",
            index: i,
            size: n,
        });
    }
    if j >= n {
        return Err(Error::IndexOutOfRange {
            what: "column sub-key",
            index: j,
            size: n,
        });
    }
    Ok(i * n + j)
}

/// Inverse of [`flat_index`].
#[inline]
pub fn split_index(idx: usize, n: usize) -> (usize, usize) {
    (idx / n, idx % n)
}

/// Selected slots of one head for a run of tokens.
///
/// `indices`, `scores` and `weights` are `[s × k]`, row-major by token. The
/// weights are the softmax of the selected scores.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadSelection<T> {
    pub k: usize,
    pub indices: Vec<usize>,
    pub scores: Vec<T>,
    pub weights: Vec<T>,
}

impl<T: Scalar> HeadSelection<T> {
    fn with_capacity(tokens: usize, k: usize) -> Self {
        HeadSelection {
            k,
            indices: Vec::with_capacity(tokens * k),
            scores: Vec::with_capacity(tokens * k),
            weights: Vec::with_capacity(tokens * k),
        }
    }

    pub fn tokens(&self) -> usize {
        self.indices.len().checked_div(self.k).unwrap_or(0)
    }

    pub fn token_indices(&self, r: usize) -> &[usize] {
        &self.indices[r * self.k..(r + 1) * self.k]
    }

    pub fn token_weights(&self, r: usize) -> &[T] {
        &self.weights[r * self.k..(r + 1) * self.k]
    }

    fn push_token(&mut self, chosen: &[(usize, T)]) -> Result<()> {
        debug_assert_eq!(chosen.len(), self.k);
        let start = self.weights.len();
        for &(idx, score) in chosen {
            self.indices.push(idx);
            self.scores.push(score);
            self.weights.push(score);
        }
        softmax_in_place(&mut self.weights[start..])?;
        debug_assert!(
            {
                let idx = &self.indices[start..];
                (1..idx.len()).all(|a| !idx[..a].contains(&idx[a]))
            },
            "duplicate slot selected within one token"
        );
        Ok(())
    }
}

/// Per-token, per-head selected slots and their normalized weights.
///
/// `indices` is `[s × H × k]` and `weights` has shape `[s, H, k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalResult<T> {
    pub tokens: usize,
    pub heads: usize,
    pub k: usize,
    pub indices: Vec<usize>,
    pub weights: Tensor<T>,
}

impl<T: Scalar> RetrievalResult<T> {
    /// Interleaves per-head selections into token-major layout.
    pub fn from_heads(heads: &[HeadSelection<T>]) -> Result<Self> {
        let h_count = heads.len();
        if h_count == 0 {
            return Err(Error::InvalidArgument("retrieval needs at least one head".into()));
        }
        let (s, k) = (heads[0].tokens(), heads[0].k);
        if heads.iter().any(|h| h.k != k || h.tokens() != s) {
            return Err(shape_err("RetrievalResult::from_heads", "heads disagree on tokens or k"));
        }
        let mut indices = Vec::with_capacity(s * h_count * k);
        let mut weights = Vec::with_capacity(s * h_count * k);
        for r in 0..s {
            for head in heads {
                indices.extend_from_slice(head.token_indices(r));
                weights.extend_from_slice(head.token_weights(r));
            }
        }
        Ok(RetrievalResult {
            tokens: s,
            heads: h_count,
            k,
            indices,
            weights: Tensor::from_vec(&[s, h_count, k], weights)?,
        })
    }

    pub fn group(&self, r: usize, h: usize) -> (&[usize], &[T]) {
        let start = (r * self.heads + h) * self.k;
        (
            &self.indices[start..start + self.k],
            &self.weights.data()[start..start + self.k],
        )
    }
}

fn check_score_pair<T: Scalar>(row: &Tensor<T>, col: &Tensor<T>) -> Result<(usize, usize)> {
    if row.shape().len() != 2 || row.shape() != col.shape() {
        return Err(shape_err(
            "product-key selection",
            format!("row scores {:?} vs column scores {:?}", row.shape(), col.shape()),
        ));
    }
    Ok((row.shape()[0], row.shape()[1]))
}

/// Two-stage product-key Top-k.
///
/// Per token: Top-k over row scores and over column scores, then Top-k over
/// the `k²` additive pair scores `S_row(i) + S_col(j)`, ranked by score and
/// then by flat index. The result equals a Top-k over all `n²` pair scores,
/// since any pair in the global Top-k has both coordinates in the per-axis
/// Top-k sets.
pub fn two_stage_topk<T: Scalar>(
    row_scores: &Tensor<T>,
    col_scores: &Tensor<T>,
    k: usize,
) -> Result<HeadSelection<T>> {
    let (s, n) = check_score_pair(row_scores, col_scores)?;
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!(
            "two-stage top-k needs 1 <= k <= n = {n}, got {k}"
        )));
    }
    let mut sel = HeadSelection::with_capacity(s, k);
    let mut candidates = Vec::with_capacity(k * k);
    for r in 0..s {
        let (sr, sc) = (row_scores.row(r), col_scores.row(r));
        let rows = topk(sr, k)?;
        let cols = topk(sc, k)?;
        candidates.clear();
        for &(i, si) in &rows {
            for &(j, sj) in &cols {
                candidates.push((i * n + j, si + sj));
            }
        }
        let chosen = select_top(candidates.iter().copied(), k)?;
        sel.push_token(&chosen)?;
    }
    Ok(sel)
}

/// Single Top-k over the full `n × n` grid of additive pair scores.
///
/// Does `O(n²)` work per token instead of `O(n)` but needs only one
/// selection pass; selects the same slots as [`two_stage_topk`] whenever
/// `k ≤ n`, and also accepts `n < k ≤ n²`.
pub fn fused_cartesian_topk<T: Scalar>(
    row_scores: &Tensor<T>,
    col_scores: &Tensor<T>,
    k: usize,
) -> Result<HeadSelection<T>> {
    let (s, n) = check_score_pair(row_scores, col_scores)?;
    if k == 0 || k > n * n {
        return Err(Error::InvalidArgument(format!(
            "fused top-k needs 1 <= k <= n^2 = {}, got {k}",
            n * n
        )));
    }
    let mut sel = HeadSelection::with_capacity(s, k);
    let mut grid = vec![T::zero(); n * n];
    for r in 0..s {
        let (sr, sc) = (row_scores.row(r), col_scores.row(r));
        for (i, &si) in sr.iter().enumerate() {
            for (j, &sj) in sc.iter().enumerate() {
                grid[i * n + j] = si + sj;
            }
        }
        let chosen = topk(&grid, k)?;
        sel.push_token(&chosen)?;
    }
    Ok(sel)
}

/// Which product-key selection kernel to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "path")]
pub enum RetrievalPath {
    TwoStage,
    Fused,
    /// Fused for calls with at most `threshold` tokens, two-stage otherwise.
    Auto { threshold: usize },
}

impl Default for RetrievalPath {
    fn default() -> Self {
        RetrievalPath::Auto {
            threshold: DEFAULT_FUSED_THRESHOLD,
        }
    }
}

pub const DEFAULT_FUSED_THRESHOLD: usize = 16;

impl RetrievalPath {
    pub fn uses_fused(self, tokens: usize) -> bool {
        match self {
            RetrievalPath::TwoStage => false,
            RetrievalPath::Fused => true,
            RetrievalPath::Auto { threshold } => tokens <= threshold,
        }
    }
}

/// Product-key selection through the kernel chosen by `path`.
pub fn select_product_keys<T: Scalar>(
    row_scores: &Tensor<T>,
    col_scores: &Tensor<T>,
    k: usize,
    path: RetrievalPath,
) -> Result<HeadSelection<T>> {
    if path.uses_fused(row_scores.rows()) {
        fused_cartesian_topk(row_scores, col_scores, k)
    } else {
        two_stage_topk(row_scores, col_scores, k)
    }
}

/// Top-k over flat scores `[s × N]` (linear memory).
pub fn flat_topk<T: Scalar>(scores: &Tensor<T>, k: usize) -> Result<HeadSelection<T>> {
    let s = scores.rows();
    let mut sel = HeadSelection::with_capacity(s, k);
    for r in 0..s {
        let chosen = topk(scores.row(r), k)?;
        sel.push_token(&chosen)?;
    }
    Ok(sel)
}
