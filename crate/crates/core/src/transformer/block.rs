use crate::error::Result;
use crate::numerics::{rms_norm, rms_norm_backward, Rng, Scalar, Tensor};
use crate::params::ParamTree;

use super::attention::{AttentionCache, AttentionParams};
use super::ffn::{FeedForward, FfnCache};

/// Epsilon used by every RMS normalization in the model.
pub const NORM_EPS: f64 = 1e-5;

/// Pre-norm block: `a = x + Attn(rms(x))`, `y = a + FFN(rms(a))`.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformerBlockParams<T> {
    pub attn_norm: Tensor<T>,
    pub attn: AttentionParams<T>,
    pub ffn_norm: Tensor<T>,
    pub ffn: FeedForward<T>,
}

#[derive(Clone, Debug)]
pub struct BlockCache<T> {
    x: Tensor<T>,
    attn_inv: Vec<T>,
    pub attn: AttentionCache<T>,
    a: Tensor<T>,
    ffn_inv: Vec<T>,
    ffn: FfnCache<T>,
}

impl<T: Scalar> TransformerBlockParams<T> {
    pub fn zeros(d: usize, heads: usize, d_ff: usize) -> Self {
        TransformerBlockParams {
            attn_norm: Tensor::zeros(&[d]),
            attn: AttentionParams::zeros(d, heads, true),
            ffn_norm: Tensor::zeros(&[d]),
            ffn: FeedForward::zeros(d, d_ff),
        }
    }

    pub fn random(d: usize, heads: usize, d_ff: usize, rng: &mut Rng) -> Self {
        TransformerBlockParams {
            attn_norm: Tensor::ones(&[d]),
            attn: AttentionParams::random(d, heads, true, rng),
            ffn_norm: Tensor::ones(&[d]),
            ffn: FeedForward::random(d, d_ff, rng),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward_cached(x, None)?.0)
    }

    pub fn forward_cached(
        &self,
        x: &Tensor<T>,
        head_scale: Option<(usize, T)>,
    ) -> Result<(Tensor<T>, BlockCache<T>)> {
        let (h, attn_inv) = rms_norm(x, &self.attn_norm, NORM_EPS)?;
        let (att, attn) = self.attn.forward_with(&h, true, head_scale)?;
        let a = x.add(&att)?;
        let (h2, ffn_inv) = rms_norm(&a, &self.ffn_norm, NORM_EPS)?;
        let (f, ffn) = self.ffn.forward(&h2)?;
        let y = a.add(&f)?;
        y.ensure_finite("transformer_block")?;
        Ok((
            y,
            BlockCache {
                x: x.clone(),
                attn_inv,
                attn,
                a,
                ffn_inv,
                ffn,
            },
        ))
    }

    /// Returns `(dx, d_heads)`.
    pub fn backward(
        &self,
        cache: &BlockCache<T>,
        dy: &Tensor<T>,
        grads: Option<&mut TransformerBlockParams<T>>,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut grads = grads;
        let dh2 = self
            .ffn
            .backward(&cache.ffn, dy, grads.as_deref_mut().map(|g| &mut g.ffn))?;
        let mut da = rms_norm_backward(
            &cache.a,
            &self.ffn_norm,
            &cache.ffn_inv,
            &dh2,
            grads.as_deref_mut().map(|g| &mut g.ffn_norm),
        );
        da.add_assign(dy)?;
        let (dh, d_heads) = self
            .attn
            .backward(&cache.attn, &da, grads.as_deref_mut().map(|g| &mut g.attn))?;
        let mut dx = rms_norm_backward(
            &cache.x,
            &self.attn_norm,
            &cache.attn_inv,
            &dh,
            grads.map(|g| &mut g.attn_norm),
        );
        dx.add_assign(&da)?;
        Ok((dx, d_heads))
    }
}

impl<T: Scalar> ParamTree<T> for TransformerBlockParams<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        out.push((crate::params::join(prefix, "attn_norm"), &self.attn_norm));
        self.attn.visit(&crate::params::join(prefix, "attn"), out);
        out.push((crate::params::join(prefix, "ffn_norm"), &self.ffn_norm));
        self.ffn.visit(&crate::params::join(prefix, "ffn"), out);
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        out.push((crate::params::join(prefix, "attn_norm"), &mut self.attn_norm));
        self.attn.visit_mut(&crate::params::join(prefix, "attn"), out);
        out.push((crate::params::join(prefix, "ffn_norm"), &mut self.ffn_norm));
        self.ffn.visit_mut(&crate::params::join(prefix, "ffn"), out);
    }
}

/// Free-function form of [`TransformerBlockParams::forward`].
pub fn transformer_block_forward<T: Scalar>(
    x: &Tensor<T>,
    params: &TransformerBlockParams<T>,
) -> Result<Tensor<T>> {
    params.forward(x)
}
