use std::str::FromStr;

use crate::error::Error;

use super::config::MemoryConfig;

/// Storage layouts compared by [`param_count`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamScheme {
    /// A separate `[N × d_h]` value table per head.
    NaiveHeadwise,
    /// Shared `[N × d_h]` table plus `H` transforms of `d_h × d_h`.
    Hive,
    /// One flat key of width `d_q` per slot.
    FlatKeys,
    /// Row and column sub-keys: `2n` keys of width `d_p` per head.
    ProductKeys,
}

impl FromStr for ParamScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "naive_headwise" => Ok(ParamScheme::NaiveHeadwise),
            "hive" => Ok(ParamScheme::Hive),
            "flat_keys" => Ok(ParamScheme::FlatKeys),
            "product_keys" => Ok(ParamScheme::ProductKeys),
            other => Err(Error::Unknown {
                what: "parameter scheme",
                name: other.to_string(),
            }),
        }
    }
}

/// Exact parameter count of one memory layer's keys or values under `scheme`.
pub fn param_count(cfg: &MemoryConfig, scheme: ParamScheme) -> usize {
    let (h, n, slots, dh) = (cfg.heads(), cfg.sub_keys(), cfg.slots(), cfg.head_dim());
    match scheme {
        ParamScheme::NaiveHeadwise => h * slots * dh,
        ParamScheme::Hive => slots * dh + h * dh * dh,
        ParamScheme::FlatKeys => slots * cfg.query_dim(),
        ParamScheme::ProductKeys => n * cfg.query_dim(),
    }
}

/// Addressable memory slots over `blocks` head-wise memory layers.
pub fn total_slots(cfg: &MemoryConfig, blocks: usize) -> usize {
    cfg.heads() * cfg.slots() * blocks
}

/// How a head scores its query against the key space.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LookupScheme {
    /// `N` dot products of width `2·d_p` against flat keys.
    Flat,
    /// `2n` dot products of width `d_p` against row and column sub-keys.
    Product,
}

/// Key-scoring cost for one token and one head.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LookupCost {
    pub dot_products: usize,
    pub width: usize,
}

impl LookupCost {
    /// Multiply-accumulates.
    pub fn macs(&self) -> usize {
        self.dot_products * self.width
    }
}

pub fn lookup_cost(cfg: &MemoryConfig, scheme: LookupScheme) -> LookupCost {
    match scheme {
        LookupScheme::Flat => LookupCost {
            dot_products: cfg.slots(),
            width: 2 * cfg.sub_dim(),
        },
        LookupScheme::Product => LookupCost {
            dot_products: 2 * cfg.sub_keys(),
            width: cfg.sub_dim(),
        },
    }
}
