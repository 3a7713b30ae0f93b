use crate::error::{shape_err, Error, Result};
use crate::numerics::{
    dot, macs, matmul, matmul_nt, matmul_tn, softmax_backward_slice, softmax_in_place, Rng, Scalar,
    Tensor,
};
use crate::params::{join, visit_tensors, visit_tensors_mut, ParamTree};

pub const DEFAULT_ROPE_BASE: f64 = 10_000.0;

/// Causal multi-head self-attention with rotary positions.
///
/// Projections use the `x · W` convention with `W: [d × d]`. Without `w_o`
/// the layer returns the concatenated per-head outputs directly.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams<T> {
    pub w_q: Tensor<T>,
    pub w_k: Tensor<T>,
    pub w_v: Tensor<T>,
    pub w_o: Option<Tensor<T>>,
    pub heads: usize,
    pub rope_base: f64,
}

/// Activations kept for the backward pass.
#[derive(Clone, Debug)]
pub struct AttentionCache<T> {
    x: Tensor<T>,
    q: Tensor<T>,
    k: Tensor<T>,
    v: Tensor<T>,
    /// `[H, s, s]`, zero above the diagonal.
    probs: Tensor<T>,
    /// Concatenated head outputs before any output projection, `[s × d]`.
    pub heads_out: Tensor<T>,
    projected: bool,
}

impl<T: Scalar> AttentionParams<T> {
    pub fn zeros(d: usize, heads: usize, with_output: bool) -> Self {
        AttentionParams {
            w_q: Tensor::zeros(&[d, d]),
            w_k: Tensor::zeros(&[d, d]),
            w_v: Tensor::zeros(&[d, d]),
            w_o: with_output.then(|| Tensor::zeros(&[d, d])),
            heads,
            rope_base: DEFAULT_ROPE_BASE,
        }
    }

    pub fn random(d: usize, heads: usize, with_output: bool, rng: &mut Rng) -> Self {
        let std = 1.0 / (d as f64).sqrt();
        AttentionParams {
            w_q: rng.normal_tensor(&[d, d], std),
            w_k: rng.normal_tensor(&[d, d], std),
            w_v: rng.normal_tensor(&[d, d], std),
            w_o: with_output.then(|| rng.normal_tensor(&[d, d], std)),
            heads,
            rope_base: DEFAULT_ROPE_BASE,
        }
    }

    pub fn dim(&self) -> usize {
        self.w_q.shape()[0]
    }

    pub fn head_dim(&self) -> usize {
        self.dim() / self.heads
    }

    /// Same weights with the output projection removed.
    pub fn without_output(&self) -> Self {
        AttentionParams {
            w_o: None,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if self.heads == 0 || !d.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "attention width {d} is not divisible by {} heads",
                self.heads
            )));
        }
        for w in [&self.w_q, &self.w_k, &self.w_v].into_iter().chain(self.w_o.as_ref()) {
            if w.shape() != [d, d] {
                return Err(shape_err("attention", format!("weight {:?}, expected [{d}, {d}]", w.shape())));
            }
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor<T>, project_output: bool) -> Result<(Tensor<T>, AttentionCache<T>)> {
        self.forward_with(x, project_output, None)
    }

    /// Forward pass; `head_scale = Some((h, c))` multiplies head `h`'s output
    /// by `c` before the output projection.
    pub fn forward_with(
        &self,
        x: &Tensor<T>,
        project_output: bool,
        head_scale: Option<(usize, T)>,
    ) -> Result<(Tensor<T>, AttentionCache<T>)> {
        let d = self.dim();
        if x.shape().len() != 2 || x.cols() != d {
            return Err(shape_err("attention", format!("input {:?} for width {d}", x.shape())));
        }
        if project_output && self.w_o.is_none() {
            return Err(Error::InvalidArgument(
                "output projection requested from attention without W_o".into(),
            ));
        }
        let (s, heads, dh) = (x.rows(), self.heads, self.head_dim());
        let mut q = matmul(x, &self.w_q)?;
        let mut k = matmul(x, &self.w_k)?;
        let v = matmul(x, &self.w_v)?;
        rope_rotate(&mut q, heads, self.rope_base, false);
        rope_rotate(&mut k, heads, self.rope_base, false);

        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let mut probs = Tensor::zeros(&[heads, s, s]);
        let mut heads_out = Tensor::zeros(&[s, d]);
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            for r in 0..s {
                let qr = &q.row(r)[cols.clone()];
                let p = &mut probs.outer_mut(h)[r * s..r * s + r + 1];
                for (t, pt) in p.iter_mut().enumerate() {
                    *pt = dot(qr, &k.row(t)[cols.clone()]) * scale;
                }
                softmax_in_place(p)?;
                let p = &probs.outer(h)[r * s..r * s + r + 1];
                let out = &mut heads_out.row_mut(r)[cols.clone()];
                for (t, &pt) in p.iter().enumerate() {
                    for (o, &vv) in out.iter_mut().zip(&v.row(t)[cols.clone()]) {
                        *o += pt * vv;
                    }
                }
                macs::add((r + 1) * dh);
            }
        }
        if let Some((h, c)) = head_scale {
            for r in 0..s {
                for val in &mut heads_out.row_mut(r)[h * dh..(h + 1) * dh] {
                    *val *= c;
                }
            }
        }
        let out = if project_output {
            matmul(&heads_out, self.w_o.as_ref().expect("checked above"))?
        } else {
            heads_out.clone()
        };
        let cache = AttentionCache {
            x: x.clone(),
            q,
            k,
            v,
            probs,
            heads_out,
            projected: project_output,
        };
        Ok((out, cache))
    }

    /// Backward pass. Returns `(dx, d_heads)` where `d_heads` is the gradient
    /// with respect to the concatenated head outputs.
    pub fn backward(
        &self,
        cache: &AttentionCache<T>,
        d_out: &Tensor<T>,
        grads: Option<&mut AttentionParams<T>>,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        let (s, heads, dh) = (cache.x.rows(), self.heads, self.head_dim());
        let mut grads = grads;
        let d_heads = if cache.projected {
            let w_o = self.w_o.as_ref().expect("projected forward had W_o");
            if let Some(g) = grads.as_deref_mut() {
                let gw = g.w_o.as_mut().expect("gradient mirrors W_o");
                gw.add_assign(&matmul_tn(&cache.heads_out, d_out)?)?;
            }
            matmul_nt(d_out, w_o)?
        } else {
            d_out.clone()
        };

        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let mut dq = Tensor::zeros(&[s, heads * dh]);
        let mut dk = Tensor::zeros(&[s, heads * dh]);
        let mut dv = Tensor::zeros(&[s, heads * dh]);
        let mut dp = vec![T::zero(); s];
        let mut dscore = vec![T::zero(); s];
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            for r in 0..s {
                let g = &d_heads.row(r)[cols.clone()];
                let p = &cache.probs.outer(h)[r * s..r * s + r + 1];
                for t in 0..=r {
                    dp[t] = dot(g, &cache.v.row(t)[cols.clone()]);
                    let pt = p[t];
                    for (a, &gv) in dv.row_mut(t)[cols.clone()].iter_mut().zip(g) {
                        *a += pt * gv;
                    }
                }
                softmax_backward_slice(p, &dp[..=r], &mut dscore[..=r]);
                for t in 0..=r {
                    let ds = dscore[t] * scale;
                    if ds == T::zero() {
                        continue;
                    }
                    for c in cols.clone() {
                        let kv = cache.k.row(t)[c];
                        let qv = cache.q.row(r)[c];
                        dq.row_mut(r)[c] += ds * kv;
                        dk.row_mut(t)[c] += ds * qv;
                    }
                }
            }
        }
        rope_rotate(&mut dq, heads, self.rope_base, true);
        rope_rotate(&mut dk, heads, self.rope_base, true);

        if let Some(g) = grads {
            g.w_q.add_assign(&matmul_tn(&cache.x, &dq)?)?;
            g.w_k.add_assign(&matmul_tn(&cache.x, &dk)?)?;
            g.w_v.add_assign(&matmul_tn(&cache.x, &dv)?)?;
        }
        let mut dx = matmul_nt(&dq, &self.w_q)?;
        dx.add_assign(&matmul_nt(&dk, &self.w_k)?)?;
        dx.add_assign(&matmul_nt(&dv, &self.w_v)?)?;
        Ok((dx, d_heads))
    }
}

impl<T: Scalar> ParamTree<T> for AttentionParams<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        visit_tensors!(self, prefix, out, [w_q, w_k, w_v]);
        if let Some(w) = &self.w_o {
            out.push((join(prefix, "w_o"), w));
        }
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        visit_tensors_mut!(self, prefix, out, [w_q, w_k, w_v]);
        if let Some(w) = &mut self.w_o {
            out.push((join(prefix, "w_o"), w));
        }
    }
}

/// Causal attention over already-normalized input.
///
/// `project_output = false` gives the raw concatenation of head outputs.
pub fn causal_attention<T: Scalar>(
    x_normed: &Tensor<T>,
    params: &AttentionParams<T>,
    project_output: bool,
) -> Result<Tensor<T>> {
    Ok(params.forward(x_normed, project_output)?.0)
}

/// Rotary position embedding applied per head, rotating dimension pairs
/// `(i, i + d_h/2)` at position `r` by `r · base^(-2i/d_h)`. `inverse`
/// rotates by the negated angle, which is also the backward pass.
pub fn rope_rotate<T: Scalar>(t: &mut Tensor<T>, heads: usize, base: f64, inverse: bool) {
    let d = t.cols();
    let dh = d / heads;
    let half = dh / 2;
    if half == 0 {
        return;
    }
    let freqs: Vec<f64> = (0..half)
        .map(|i| base.powf(-2.0 * i as f64 / dh as f64))
        .collect();
    let sign = if inverse { -1.0 } else { 1.0 };
    for r in 0..t.rows() {
        let row = t.row_mut(r);
        for (i, &f) in freqs.iter().enumerate() {
            let angle = r as f64 * f;
            let (c, s) = (T::from_f64(angle.cos()), T::from_f64(sign * angle.sin()));
            for h in 0..heads {
                let a = h * dh + i;
                let b = a + half;
                let (x1, x2) = (row[a], row[b]);
                row[a] = x1 * c - x2 * s;
                row[b] = x1 * s + x2 * c;
            }
        }
    }
}
