use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Retrieval hyperparameters shared by the product-key layers.
///
/// Stores the head count `H`, sub-keys per axis `n`, retrieval width `k` and
/// model width `d`; the composite key count `N = n²`, head width
/// `d_h = d / H` and sub-query width `d_p = d_h / 2` are derived.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryConfig {
    heads: usize,
    sub_keys: usize,
    top_k: usize,
    model_dim: usize,
}

impl MemoryConfig {
    pub fn new(heads: usize, sub_keys: usize, top_k: usize, model_dim: usize) -> Result<Self> {
        let cfg = MemoryConfig {
            heads,
            sub_keys,
            top_k,
            model_dim,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.heads == 0 || self.sub_keys == 0 || self.model_dim == 0 {
            return bad("memory heads, sub_keys and model width must be positive".into());
        }
        if !self.model_dim.is_multiple_of(self.heads) {
            return bad(format!(
                "model width {} is not divisible by {} heads",
                self.model_dim, self.heads
            ));
        }
        if !self.head_dim().is_multiple_of(2) {
            return bad(format!(
                "head width {} must be even to split into row/column sub-queries",
                self.head_dim()
            ));
        }
        if self.top_k == 0 || self.top_k > self.sub_keys {
            return bad(format!(
                "top_k must satisfy 1 <= k <= n = {}, got {}",
                self.sub_keys, self.top_k
            ));
        }
        Ok(())
    }

    /// `H`.
    pub fn heads(&self) -> usize {
        self.heads
    }

    /// `n`, sub-keys per axis per head.
    pub fn sub_keys(&self) -> usize {
        self.sub_keys
    }

    /// `N = n²`, composite keys per head.
    pub fn slots(&self) -> usize {
        self.sub_keys * self.sub_keys
    }

    /// `k`.
    pub fn top_k(&self) -> usize {
        self.top_k
    }

    /// `d`.
    pub fn model_dim(&self) -> usize {
        self.model_dim
    }

    /// `d_h = d / H`.
    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }

    /// `d_p = d_h / 2`.
    pub fn sub_dim(&self) -> usize {
        self.head_dim() / 2
    }

    /// Query width `d_q`; HML queries are head embeddings, so `d_q = d`.
    pub fn query_dim(&self) -> usize {
        self.model_dim
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derived_sizes() {
        let cfg = MemoryConfig::new(32, 64, 4, 2048).unwrap();
        assert_eq!(cfg.slots(), 4096);
        assert_eq!(cfg.head_dim(), 64);
        assert_eq!(cfg.sub_dim(), 32);
        assert_eq!(cfg.query_dim(), 2 * cfg.heads() * cfg.sub_dim());
    }

    #[test]
    fn rejects_inconsistent_configs() {
        assert!(MemoryConfig::new(3, 8, 2, 64).is_err()); // 64 % 3
        assert!(MemoryConfig::new(64, 8, 2, 64).is_err()); // d_h = 1 is odd
        assert!(MemoryConfig::new(4, 8, 9, 64).is_err()); // k > n
        assert!(MemoryConfig::new(4, 8, 0, 64).is_err());
        assert!(MemoryConfig::new(4, 8, 8, 64).is_ok());
    }
}
