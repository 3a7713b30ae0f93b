use crate::error::{shape_err, Error, Result};
use crate::numerics::{Scalar, Tensor};

fn check_targets<T: Scalar>(logits: &Tensor<T>, targets: &[usize]) -> Result<()> {
    if logits.shape().len() != 2 || logits.rows() != targets.len() {
        return Err(shape_err(
            "lm_loss",
            format!("logits {:?} for {} targets", logits.shape(), targets.len()),
        ));
    }
    let vocab = logits.cols();
    if let Some(&bad) = targets.iter().find(|&&t| t >= vocab) {
        return Err(Error::IndexOutOfRange {
            what: "target token",
            index: bad,
            size: vocab,
        });
    }
    Ok(())
}

/// Mean next-token negative log-likelihood.
pub fn lm_loss<T: Scalar>(logits: &Tensor<T>, targets: &[usize]) -> Result<T> {
    Ok(cross_entropy(logits, targets, None)?.0)
}

/// Mean cross-entropy over the positions where `mask` is true (all
/// positions when `mask` is `None`), and its gradient with respect to the
/// logits.
pub fn cross_entropy<T: Scalar>(
    logits: &Tensor<T>,
    targets: &[usize],
    mask: Option<&[bool]>,
) -> Result<(T, Tensor<T>)> {
    check_targets(logits, targets)?;
    if let Some(m) = mask {
        if m.len() != targets.len() {
            return Err(shape_err("lm_loss", format!("mask of {} for {} targets", m.len(), targets.len())));
        }
    }
    let active = |r: usize| mask.is_none_or(|m| m[r]);
    let count = (0..targets.len()).filter(|&r| active(r)).count();
    if count == 0 {
        return Err(Error::InvalidArgument("loss over zero positions".into()));
    }
    let inv = T::from_f64(1.0 / count as f64);
    let mut grad = Tensor::zeros(logits.shape());
    let mut total = T::zero();
    for (r, &t) in targets.iter().enumerate() {
        if !active(r) {
            continue;
        }
        let row = logits.row(r);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        if !max.is_finite() {
            return Err(Error::NonFinite("lm_loss"));
        }
        let sum: T = row.iter().map(|&z| (z - max).exp()).sum();
        let lse = max + sum.ln();
        total += lse - row[t];
        let g = grad.row_mut(r);
        for (gi, &z) in g.iter_mut().zip(row) {
            *gi = (z - lse).exp() * inv;
        }
        g[t] -= inv;
    }
    let loss = total * inv;
    if !loss.is_finite() {
        return Err(Error::NonFinite("lm_loss"));
    }
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_log_vocab() {
        let logits = Tensor::<f64>::zeros(&[3, 256]);
        let loss = lm_loss(&logits, &[1, 2, 255]).unwrap();
        assert!((loss - 256f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_logits_give_near_zero() {
        let mut logits = Tensor::<f64>::zeros(&[2, 4]);
        logits.row_mut(0)[2] = 50.0;
        logits.row_mut(1)[0] = 50.0;
        assert!(lm_loss(&logits, &[2, 0]).unwrap() < 1e-12);
    }

    #[test]
    fn matches_log_softmax_oracle() {
        let logits = Tensor::<f64>::from_f64(&[2, 3], &[0.5, -1.0, 2.0, 0.1, 0.2, 0.3]).unwrap();
        let targets = [0, 2];
        let mut want = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = logits.row(r);
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            want -= (row[t].exp() / z).ln();
        }
        want /= 2.0;
        assert!((lm_loss(&logits, &targets).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn masked_positions_are_ignored() {
        let logits = Tensor::<f64>::from_f64(&[2, 2], &[5.0, 0.0, 0.0, 5.0]).unwrap();
        let (l, g) = cross_entropy(&logits, &[0, 0], Some(&[true, false])).unwrap();
        assert!(l < 0.01);
        assert_eq!(g.row(1), &[0.0, 0.0]);
        assert!(cross_entropy(&logits, &[0, 0], Some(&[false, false])).is_err());
    }

    #[test]
    fn rejects_out_of_range_target() {
        let logits = Tensor::<f32>::zeros(&[1, 4]);
        assert!(matches!(lm_loss(&logits, &[4]), Err(Error::IndexOutOfRange { .. })));
    }
}
