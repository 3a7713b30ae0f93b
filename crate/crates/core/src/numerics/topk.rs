use std::cmp::Ordering;

use crate::error::{Error, Result};

use super::scalar::Scalar;

/// Total order used by every Top-k in the crate: higher score first, and on
/// equal scores the lower index wins.
#[inline]
pub fn rank_order<T: Scalar>(a: &(usize, T), b: &(usize, T)) -> Ordering {
    match b.1.partial_cmp(&a.1) {
        Some(Ordering::Equal) | None => a.0.cmp(&b.0),
        Some(o) => o,
    }
}

/// Indices and scores of the `k` largest entries, sorted by [`rank_order`].
pub fn topk<T: Scalar>(scores: &[T], k: usize) -> Result<Vec<(usize, T)>> {
    if k == 0 || k > scores.len() {
        return Err(Error::InvalidArgument(format!(
            "top-k needs 1 <= k <= {}, got k = {k}",
            scores.len()
        )));
    }
    select_top(scores.iter().copied().enumerate(), k)
}

/// Top-`k` over arbitrary `(id, score)` candidates under [`rank_order`].
///
/// Returns fewer than `k` entries only if fewer candidates are supplied.
pub fn select_top<T: Scalar>(
    candidates: impl IntoIterator<Item = (usize, T)>,
    k: usize,
) -> Result<Vec<(usize, T)>> {
    let mut best: Vec<(usize, T)> = Vec::with_capacity(k + 1);
    for cand in candidates {
        if cand.1.is_nan() {
            return Err(Error::NonFinite("topk"));
        }
        if best.len() == k {
            if rank_order(&cand, &best[k - 1]) != Ordering::Less {
                continue;
            }
            best.pop();
        }
        let pos = best.partition_point(|e| rank_order(e, &cand) == Ordering::Less);
        best.insert(pos, cand);
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    #[test]
    fn tie_break_prefers_lower_index() {
        assert_eq!(topk(&[1.0f32, 1.0, 0.0], 1).unwrap(), vec![(0, 1.0)]);
    }

    #[test]
    fn direct_ordering() {
        assert_eq!(topk(&[3.0f64, 1.0, 2.0], 2).unwrap(), vec![(0, 3.0), (2, 2.0)]);
    }

    #[test]
    fn rejects_bad_k_and_nan() {
        assert!(topk(&[1.0f32], 2).is_err());
        assert!(topk(&[1.0f32], 0).is_err());
        assert!(matches!(topk(&[1.0f32, f32::NAN], 1), Err(Error::NonFinite(_))));
    }

    #[test]
    fn matches_full_sort_for_every_k() {
        let mut rng = Rng::new(77);
        // Coarse values force plenty of ties.
        let scores: Vec<f64> = (0..100).map(|_| (rng.normal() * 3.0).round()).collect();
        let mut sorted: Vec<(usize, f64)> = scores.iter().copied().enumerate().collect();
        sorted.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        for k in 1..=100 {
            assert_eq!(topk(&scores, k).unwrap(), sorted[..k].to_vec(), "k = {k}");
        }
    }
}
