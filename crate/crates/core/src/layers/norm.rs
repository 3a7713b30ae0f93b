use crate::error::{shape_err, Result};
use crate::numerics::{Scalar, Tensor};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;
pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum NormMode {
    #[default]
    Train,
    Eval,
}

/// Affine-free batch normalization over the token axis.
///
/// Running statistics start at mean 0 and variance 1 and are updated as
/// `running ← (1 − momentum)·running + momentum·batch`, using the unbiased
/// batch variance.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm<T> {
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub momentum: f64,
    pub eps: f64,
}

#[derive(Clone, Debug)]
pub struct BnCache<T> {
    xhat: Tensor<T>,
    inv_std: Vec<T>,
    mode: NormMode,
    batch_mean: Vec<T>,
    batch_var: Vec<T>,
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(width: usize) -> Self {
        BatchNorm {
            running_mean: Tensor::zeros(&[width]),
            running_var: Tensor::ones(&[width]),
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
        }
    }

    pub fn width(&self) -> usize {
        self.running_mean.len()
    }

    pub fn forward(&self, q: &Tensor<T>, mode: NormMode) -> Result<(Tensor<T>, BnCache<T>)> {
        let w = self.width();
        if q.shape().len() != 2 || q.cols() != w || q.rows() == 0 {
            return Err(shape_err("batchnorm_query", format!("input {:?} for width {w}", q.shape())));
        }
        let s = q.rows();
        let mut mean = vec![T::zero(); w];
        let mut var = vec![T::zero(); w];
        let mut unbiased = vec![T::zero(); w];
        for r in 0..s {
            for (m, &x) in mean.iter_mut().zip(q.row(r)) {
                *m += x;
            }
        }
        let inv_s = T::from_f64(1.0 / s as f64);
        mean.iter_mut().for_each(|m| *m *= inv_s);
        for r in 0..s {
            for ((v, &x), &m) in var.iter_mut().zip(q.row(r)).zip(&mean) {
                *v += (x - m) * (x - m);
            }
        }
        let denom = T::from_f64(1.0 / s.saturating_sub(1).max(1) as f64);
        for j in 0..w {
            unbiased[j] = var[j] * denom;
            var[j] *= inv_s;
        }
        let eps = T::from_f64(self.eps);
        let (center, inv_std): (Vec<T>, Vec<T>) = match mode {
            NormMode::Train => (mean.clone(), var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect()),
            NormMode::Eval => (
                self.running_mean.data().to_vec(),
                self.running_var.data().iter().map(|&v| T::one() / (v + eps).sqrt()).collect(),
            ),
        };
        let mut xhat = Tensor::zeros(q.shape());
        for r in 0..s {
            let out = xhat.row_mut(r);
            for j in 0..w {
                out[j] = (q.row(r)[j] - center[j]) * inv_std[j];
            }
        }
        xhat.ensure_finite("batchnorm_query")?;
        let cache = BnCache {
            xhat: xhat.clone(),
            inv_std,
            mode,
            batch_mean: mean,
            batch_var: unbiased,
        };
        Ok((xhat, cache))
    }

    pub fn backward(&self, cache: &BnCache<T>, dy: &Tensor<T>) -> Tensor<T> {
        let (s, w) = (dy.rows(), dy.cols());
        let mut dx = Tensor::zeros(dy.shape());
        match cache.mode {
            NormMode::Eval => {
                for r in 0..s {
                    for j in 0..w {
                        dx.row_mut(r)[j] = dy.row(r)[j] * cache.inv_std[j];
                    }
                }
            }
            NormMode::Train => {
                let sf = T::from_f64(s as f64);
                for j in 0..w {
                    let mut sum = T::zero();
                    let mut sum_x = T::zero();
                    for r in 0..s {
                        let g = dy.row(r)[j];
                        sum += g;
                        sum_x += g * cache.xhat.row(r)[j];
                    }
                    let scale = cache.inv_std[j] / sf;
                    for r in 0..s {
                        let g = dy.row(r)[j];
                        dx.row_mut(r)[j] = scale * (sf * g - sum - cache.xhat.row(r)[j] * sum_x);
                    }
                }
            }
        }
        dx
    }

    /// Folds one training batch into the running statistics.
    pub fn update_running(&mut self, cache: &BnCache<T>) {
        let m = T::from_f64(self.momentum);
        let keep = T::one() - m;
        for (r, &b) in self.running_mean.data_mut().iter_mut().zip(&cache.batch_mean) {
            *r = keep * *r + m * b;
        }
        for (r, &b) in self.running_var.data_mut().iter_mut().zip(&cache.batch_var) {
            *r = keep * *r + m * b;
        }
    }
}

/// Standardizes each query feature over the token axis; `mode` picks batch
/// or running statistics.
pub fn batchnorm_query<T: Scalar>(q: &Tensor<T>, stats: &BatchNorm<T>, mode: NormMode) -> Result<Tensor<T>> {
    Ok(stats.forward(q, mode)?.0)
}

/// Affine-free layer normalization of each row. Returns the output and the
/// per-row inverse standard deviations.
pub fn layer_norm<T: Scalar>(x: &Tensor<T>, eps: f64) -> (Tensor<T>, Vec<T>) {
    let w = x.cols();
    let inv_w = T::from_f64(1.0 / w as f64);
    let eps = T::from_f64(eps);
    let mut out = Tensor::zeros(x.shape());
    let mut invs = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = x.row(r);
        let mean = row.iter().copied().sum::<T>() * inv_w;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_w;
        let inv = T::one() / (var + eps).sqrt();
        for (o, &v) in out.row_mut(r).iter_mut().zip(row) {
            *o = (v - mean) * inv;
        }
        invs.push(inv);
    }
    (out, invs)
}

/// Backward of [`layer_norm`] given its output `xhat`.
pub fn layer_norm_backward<T: Scalar>(xhat: &Tensor<T>, inv: &[T], dy: &Tensor<T>) -> Tensor<T> {
    let w = xhat.cols();
    let wf = T::from_f64(w as f64);
    let mut dx = Tensor::zeros(dy.shape());
    for r in 0..dy.rows() {
        let (g, xh) = (dy.row(r), xhat.row(r));
        let sum: T = g.iter().copied().sum();
        let sum_x: T = g.iter().zip(xh).map(|(&a, &b)| a * b).sum();
        let scale = inv[r] / wf;
        for ((o, &gi), &xi) in dx.row_mut(r).iter_mut().zip(g).zip(xh) {
            *o = scale * (wf * gi - sum - xi * sum_x);
        }
    }
    dx
}
