use crate::error::{shape_err, Error, Result};
use crate::numerics::{dot, Rng, Scalar, Tensor};
use crate::params::{visit_tensors, visit_tensors_mut, ParamTree};

use super::config::MemoryConfig;

/// Row and column sub-key tables, one independent pair per head.
///
/// Both tables have shape `[H, n, d_p]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProductKeyBank<T> {
    pub rows: Tensor<T>,
    pub cols: Tensor<T>,
}

impl<T: Scalar> ProductKeyBank<T> {
    pub fn zeros(cfg: &MemoryConfig) -> Self {
        let shape = [cfg.heads(), cfg.sub_keys(), cfg.sub_dim()];
        ProductKeyBank {
            rows: Tensor::zeros(&shape),
            cols: Tensor::zeros(&shape),
        }
    }

    /// Gaussian sub-keys with standard deviation `1/sqrt(d_p)`.
    pub fn random(cfg: &MemoryConfig, rng: &mut Rng) -> Self {
        let shape = [cfg.heads(), cfg.sub_keys(), cfg.sub_dim()];
        let std = 1.0 / (cfg.sub_dim() as f64).sqrt();
        ProductKeyBank {
            rows: rng.normal_tensor(&shape, std),
            cols: rng.normal_tensor(&shape, std),
        }
    }

    pub fn heads(&self) -> usize {
        self.rows.shape()[0]
    }

    pub fn sub_keys(&self) -> usize {
        self.rows.shape()[1]
    }

    pub fn sub_dim(&self) -> usize {
        self.rows.shape()[2]
    }
}

impl<T: Scalar> ParamTree<T> for ProductKeyBank<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        visit_tensors!(self, prefix, out, [rows, cols]);
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        visit_tensors_mut!(self, prefix, out, [rows, cols]);
    }
}

/// Row and column sub-key scores of head `h`.
///
/// `q_h` is `[s × 2·d_p]`; its first half scores against the row keys and
/// its second half against the column keys. Returns two `[s × n]` tensors.
pub fn score_subkeys<T: Scalar>(
    q_h: &Tensor<T>,
    bank: &ProductKeyBank<T>,
    h: usize,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (n, dp) = (bank.sub_keys(), bank.sub_dim());
    if q_h.shape().len() != 2 || q_h.cols() != 2 * dp {
        return Err(shape_err(
            "score_subkeys",
            format!("query {:?} needs width {}", q_h.shape(), 2 * dp),
        ));
    }
    if h >= bank.heads() {
        return Err(Error::IndexOutOfRange {
            what: "memory head",
            index: h,
            size: bank.heads(),
        });
    }
    let s = q_h.rows();
    let (krow, kcol) = (bank.rows.outer(h), bank.cols.outer(h));
    let mut row = Tensor::zeros(&[s, n]);
    let mut col = Tensor::zeros(&[s, n]);
    for r in 0..s {
        let q = q_h.row(r);
        let (qr, qc) = q.split_at(dp);
        for i in 0..n {
            row.data_mut()[r * n + i] = dot(qr, &krow[i * dp..(i + 1) * dp]);
            col.data_mut()[r * n + i] = dot(qc, &kcol[i * dp..(i + 1) * dp]);
        }
    }
    row.ensure_finite("score_subkeys")?;
    col.ensure_finite("score_subkeys")?;
    Ok((row, col))
}

/// Backward pass of [`score_subkeys`]. Returns `dq_h`; accumulates sub-key
/// gradients into `dbank` when given.
pub fn score_subkeys_backward<T: Scalar>(
    q_h: &Tensor<T>,
    bank: &ProductKeyBank<T>,
    h: usize,
    d_row: &Tensor<T>,
    d_col: &Tensor<T>,
    dbank: Option<&mut ProductKeyBank<T>>,
) -> Tensor<T> {
    let (n, dp) = (bank.sub_keys(), bank.sub_dim());
    let s = q_h.rows();
    let (krow, kcol) = (bank.rows.outer(h), bank.cols.outer(h));
    let mut dq = Tensor::zeros(&[s, 2 * dp]);
    let mut dbank = dbank;
    for r in 0..s {
        let (gr, gc) = (d_row.row(r), d_col.row(r));
        let dqr = dq.row_mut(r);
        for i in 0..n {
            let (a, b) = (gr[i], gc[i]);
            if a != T::zero() {
                for p in 0..dp {
                    dqr[p] += a * krow[i * dp + p];
                }
            }
            if b != T::zero() {
                for p in 0..dp {
                    dqr[dp + p] += b * kcol[i * dp + p];
                }
            }
        }
        if let Some(g) = dbank.as_deref_mut() {
            let q = q_h.row(r);
            let grow = g.rows.outer_mut(h);
            for i in 0..n {
                let a = gr[i];
                if a != T::zero() {
                    for p in 0..dp {
                        grow[i * dp + p] += a * q[p];
                    }
                }
            }
            let gcol = g.cols.outer_mut(h);
            for i in 0..n {
                let b = gc[i];
                if b != T::zero() {
                    for p in 0..dp {
                        gcol[i * dp + p] += b * q[dp + p];
                    }
                }
            }
        }
    }
    dq
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::matmul_nt;

    fn cfg() -> MemoryConfig {
        MemoryConfig::new(2, 4, 2, 8).unwrap()
    }

    #[test]
    fn one_hot_query_selects_basis_key() {
        let cfg = MemoryConfig::new(1, 2, 1, 4).unwrap();
        let mut bank = ProductKeyBank::<f64>::zeros(&cfg);
        bank.rows = Tensor::from_f64(&[1, 2, 2], &[1., 0., 0., 1.]).unwrap();
        let q = Tensor::from_f64(&[1, 4], &[1., 0., 0., 0.]).unwrap();
        let (row, col) = score_subkeys(&q, &bank, 0).unwrap();
        assert_eq!(row.data(), &[1., 0.]);
        assert_eq!(col.data(), &[0., 0.]);
    }

    #[test]
    fn zero_query_gives_zero_scores() {
        let bank = ProductKeyBank::<f32>::random(&cfg(), &mut Rng::new(1));
        let (row, col) = score_subkeys(&Tensor::zeros(&[3, 4]), &bank, 1).unwrap();
        assert!(row.data().iter().chain(col.data()).all(|&v| v == 0.0));
    }

    #[test]
    fn matches_dense_matmul() {
        let cfg = cfg();
        let mut rng = Rng::new(8);
        let bank = ProductKeyBank::<f64>::random(&cfg, &mut rng);
        let q: Tensor<f64> = rng.normal_tensor(&[5, 4], 1.0);
        for h in 0..2 {
            let (row, col) = score_subkeys(&q, &bank, h).unwrap();
            let want_row = matmul_nt(&q.slice_cols(0, 2), &bank.rows.outer_tensor(h)).unwrap();
            let want_col = matmul_nt(&q.slice_cols(2, 4), &bank.cols.outer_tensor(h)).unwrap();
            assert!(row.max_abs_diff(&want_row) < 1e-12);
            assert!(col.max_abs_diff(&want_col) < 1e-12);
        }
    }

    #[test]
    fn shape_and_head_errors() {
        let bank = ProductKeyBank::<f32>::zeros(&cfg());
        assert!(score_subkeys(&Tensor::zeros(&[1, 3]), &bank, 0).is_err());
        assert!(score_subkeys(&Tensor::zeros(&[1, 4]), &bank, 2).is_err());
    }
}
