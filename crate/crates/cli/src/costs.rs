//! Analytic per-token multiply-accumulate counts for one block's prefill.

use midus::memory::{lookup_cost, LookupScheme, MemoryConfig};

use crate::config::ExperimentConfig;

/// Transformer block: Q, K, V, O projections plus the gated feed-forward.
pub fn transformer_block_macs(d: usize, d_ff: usize) -> usize {
    4 * d * d + 3 * d * d_ff
}

/// HML block: Q, K, V projections (plus O when kept), per-head sub-key
/// scoring, pooling of `k` base rows and the per-head value transform.
pub fn hml_block_macs(mem: &MemoryConfig, output_projection: bool) -> usize {
    let d = mem.model_dim();
    let dh = mem.head_dim();
    let proj = if output_projection { 4 } else { 3 } * d * d;
    let scoring = mem.heads() * lookup_cost(mem, LookupScheme::Product).macs();
    let values = mem.heads() * (mem.top_k() * dh + dh * dh);
    proj + scoring + values
}

/// Causal score and mixing products over a length-`s` prompt, summed over
/// heads. Quadratic in `s`; reported separately from the linear terms.
pub fn attention_macs(d: usize, s: usize) -> usize {
    s * (s + 1) * d
}

pub fn prefill_macs(cfg: &ExperimentConfig, kind: &str, s: usize) -> usize {
    let per_token = match kind {
        "transformer" => transformer_block_macs(cfg.model.d, cfg.model.d_ff),
        _ => {
            let mem = cfg.memory_config().expect("validated config");
            hml_block_macs(&mem, cfg.memory.layer_kind().toggles.output_projection)
        }
    };
    per_token * s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_hml_cheaper_than_ffn_block() {
        let cfg = ExperimentConfig::default();
        for s in [1, 16, 256] {
            assert!(prefill_macs(&cfg, "hml", s) < prefill_macs(&cfg, "transformer", s));
        }
    }
}
