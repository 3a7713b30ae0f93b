use crate::error::{shape_err, Result};
use crate::numerics::{matmul, matmul_nt, matmul_tn, Rng, Scalar, Tensor};
use crate::params::{visit_tensors, visit_tensors_mut, ParamTree};

/// Gated feed-forward layer: `(silu(h·W_gate) ⊙ h·W_up) · W_down`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeedForward<T> {
    pub w_gate: Tensor<T>,
    pub w_up: Tensor<T>,
    pub w_down: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct FfnCache<T> {
    h: Tensor<T>,
    gate: Tensor<T>,
    up: Tensor<T>,
    act: Tensor<T>,
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

impl<T: Scalar> FeedForward<T> {
    pub fn zeros(d: usize, d_ff: usize) -> Self {
        FeedForward {
            w_gate: Tensor::zeros(&[d, d_ff]),
            w_up: Tensor::zeros(&[d, d_ff]),
            w_down: Tensor::zeros(&[d_ff, d]),
        }
    }

    pub fn random(d: usize, d_ff: usize, rng: &mut Rng) -> Self {
        let (si, so) = (1.0 / (d as f64).sqrt(), 1.0 / (d_ff as f64).sqrt());
        FeedForward {
            w_gate: rng.normal_tensor(&[d, d_ff], si),
            w_up: rng.normal_tensor(&[d, d_ff], si),
            w_down: rng.normal_tensor(&[d_ff, d], so),
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_up.cols()
    }

    pub fn forward(&self, h: &Tensor<T>) -> Result<(Tensor<T>, FfnCache<T>)> {
        if h.cols() != self.w_up.shape()[0] {
            return Err(shape_err("ffn", format!("input {:?}, W_up {:?}", h.shape(), self.w_up.shape())));
        }
        let gate = matmul(h, &self.w_gate)?;
        let up = matmul(h, &self.w_up)?;
        let mut act = gate.clone();
        for (a, &u) in act.data_mut().iter_mut().zip(up.data()) {
            *a = *a * sigmoid(*a) * u;
        }
        let out = matmul(&act, &self.w_down)?;
        Ok((
            out,
            FfnCache {
                h: h.clone(),
                gate,
                up,
                act,
            },
        ))
    }

    pub fn backward(
        &self,
        cache: &FfnCache<T>,
        d_out: &Tensor<T>,
        grads: Option<&mut FeedForward<T>>,
    ) -> Result<Tensor<T>> {
        let d_act = matmul_nt(d_out, &self.w_down)?;
        let mut d_gate = d_act.clone();
        let mut d_up = d_act;
        for i in 0..d_gate.len() {
            let g = cache.gate.data()[i];
            let u = cache.up.data()[i];
            let sg = sigmoid(g);
            let silu = g * sg;
            let da = d_gate.data()[i];
            d_up.data_mut()[i] = da * silu;
            d_gate.data_mut()[i] = da * u * sg * (T::one() + g * (T::one() - sg));
        }
        if let Some(gr) = grads {
            gr.w_down.add_assign(&matmul_tn(&cache.act, d_out)?)?;
            gr.w_gate.add_assign(&matmul_tn(&cache.h, &d_gate)?)?;
            gr.w_up.add_assign(&matmul_tn(&cache.h, &d_up)?)?;
        }
        let mut dh = matmul_nt(&d_gate, &self.w_gate)?;
        dh.add_assign(&matmul_nt(&d_up, &self.w_up)?)?;
        Ok(dh)
    }
}

impl<T: Scalar> ParamTree<T> for FeedForward<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        visit_tensors!(self, prefix, out, [w_gate, w_up, w_down]);
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        visit_tensors_mut!(self, prefix, out, [w_gate, w_up, w_down]);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_elementwise_reference() {
        let mut rng = Rng::new(3);
        let ffn = FeedForward::<f64>::random(4, 6, &mut rng);
        let h: Tensor<f64> = rng.normal_tensor(&[3, 4], 1.0);
        let (out, _) = ffn.forward(&h).unwrap();
        for r in 0..3 {
            for c in 0..4 {
                let mut want = 0.0;
                for j in 0..6 {
                    let (mut g, mut u) = (0.0, 0.0);
                    for i in 0..4 {
                        g += h.row(r)[i] * ffn.w_gate.row(i)[j];
                        u += h.row(r)[i] * ffn.w_up.row(i)[j];
                    }
                    want += g / (1.0 + (-g).exp()) * u * ffn.w_down.row(j)[c];
                }
                assert!((out.row(r)[c] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_down_projection_is_silent() {
        let mut rng = Rng::new(4);
        let mut ffn = FeedForward::<f32>::random(4, 8, &mut rng);
        ffn.w_down.fill(0.0);
        let (out, _) = ffn.forward(&rng.normal_tensor(&[2, 4], 1.0)).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }
}
