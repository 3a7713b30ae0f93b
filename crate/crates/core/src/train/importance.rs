use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};
use crate::transformer::{cross_entropy, Block, ForwardOptions, Model};

use super::corpus::Sequence;

/// Head importance per transformer block and head, plus the variance over
/// heads within each block.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadImportanceReport {
    /// Model block index of each scored layer.
    pub blocks: Vec<usize>,
    /// `[layers × H]`.
    pub scores: Tensor<f64>,
    pub variance: Vec<f64>,
}

pub const IMPORTANCE_CSV_HEADER: &str = "layer,block,head,importance";
pub const VARIANCE_CSV_HEADER: &str = "layer,block,variance";

impl HeadImportanceReport {
    pub fn layers(&self) -> usize {
        self.blocks.len()
    }

    /// Elementwise absolute scores.
    pub fn abs_scores(&self) -> Tensor<f64> {
        self.scores.map(f64::abs)
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{IMPORTANCE_CSV_HEADER}\n");
        for (l, &b) in self.blocks.iter().enumerate() {
            for (h, v) in self.scores.row(l).iter().enumerate() {
                let _ = writeln!(s, "{l},{b},{h},{v:.17e}");
            }
        }
        s
    }

    pub fn variance_csv(&self) -> String {
        let mut s = format!("{VARIANCE_CSV_HEADER}\n");
        for (l, (&b, v)) in self.blocks.iter().zip(&self.variance).enumerate() {
            let _ = writeln!(s, "{l},{b},{v:.17e}");
        }
        s
    }
}

/// Population variance.
pub fn population_variance(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n
}

/// `IS_h`: the inner product between head `h`'s output over a whole
/// sequence and the loss gradient at that output, averaged over the
/// dataset. Signed. Computed for every transformer block, in eval mode.
pub fn head_importance<T: Scalar>(model: &Model<T>, dataset: &[Sequence]) -> Result<HeadImportanceReport> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("head importance over an empty dataset".into()));
    }
    model.validate()?;
    let blocks: Vec<usize> = model
        .blocks
        .iter()
        .enumerate()
        .filter(|(_, b)| matches!(b, Block::Transformer(_)))
        .map(|(i, _)| i)
        .collect();
    let heads = model.dims.heads;
    let dh = model.dims.d / heads;
    let mut scores = Tensor::<f64>::zeros(&[blocks.len(), heads]);
    for seq in dataset {
        let (logits, cache) = model.forward_with(&seq.tokens, &ForwardOptions::default())?;
        let (_, dlogits) = cross_entropy(&logits, &seq.targets, Some(&seq.mask))?;
        let out = model.backward(&cache, &dlogits, None, true)?;
        for (l, &b) in blocks.iter().enumerate() {
            let a = cache.heads_out(b).expect("transformer block caches head outputs");
            let g = out.d_heads[b].as_ref().expect("head gradients requested");
            for h in 0..heads {
                let mut acc = 0.0;
                for r in 0..a.rows() {
                    for c in h * dh..(h + 1) * dh {
                        acc += a.row(r)[c].as_f64() * g.row(r)[c].as_f64();
                    }
                }
                scores.row_mut(l)[h] += acc;
            }
        }
    }
    scores.scale(1.0 / dataset.len() as f64);
    let variance = (0..blocks.len()).map(|l| population_variance(scores.row(l))).collect();
    Ok(HeadImportanceReport {
        blocks,
        scores,
        variance,
    })
}
