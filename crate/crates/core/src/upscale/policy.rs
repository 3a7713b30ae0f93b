use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Where inserted blocks go in the expanded stack.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlacementPolicy {
    TopHeavy,
    Distributed,
    BottomHeavy,
    LlamaPro,
}

impl PlacementPolicy {
    pub const ALL: [PlacementPolicy; 4] = [
        PlacementPolicy::TopHeavy,
        PlacementPolicy::LlamaPro,
        PlacementPolicy::Distributed,
        PlacementPolicy::BottomHeavy,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PlacementPolicy::TopHeavy => "top_heavy",
            PlacementPolicy::Distributed => "distributed",
            PlacementPolicy::BottomHeavy => "bottom_heavy",
            PlacementPolicy::LlamaPro => "llama_pro",
        }
    }
}

impl fmt::Display for PlacementPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PlacementPolicy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        PlacementPolicy::ALL
            .into_iter()
            .find(|p| p.as_str() == s.replace('-', "_"))
            .ok_or_else(|| Error::Unknown {
                what: "placement policy",
                name: s.to_string(),
            })
    }
}

/// Positions of the `k` inserted blocks in an expanded stack of `l + k`
/// blocks, strictly increasing.
///
/// - `top_heavy`: `l − k + 2t`, alternating through the top of the stack.
/// - `bottom_heavy`: `2t`, alternating from the bottom.
/// - `distributed`: insert `t` sits just before base block `⌊t·l/k⌋ + 1`
///   (`⌊t·l/k⌋` when `k = l`), so every insert has a base block above it.
/// - `llama_pro`: insert `t` sits just after base block `⌊(t+1)·l/k⌋ − 1`,
///   so the last insert closes the stack.
pub fn policy_indices(policy: PlacementPolicy, l: usize, k: usize) -> Result<Vec<usize>> {
    if k > l {
        return Err(Error::Config(format!(
            "cannot insert {k} blocks into a {l}-block model (need K <= L)"
        )));
    }
    let out: Vec<usize> = (0..k)
        .map(|t| match policy {
            PlacementPolicy::TopHeavy => l - k + 2 * t,
            PlacementPolicy::BottomHeavy => 2 * t,
            PlacementPolicy::Distributed => {
                let offset = usize::from(k < l);
                t * l / k + offset + t
            }
            PlacementPolicy::LlamaPro => (t + 1) * l / k - 1 + t + 1,
        })
        .collect();
    debug_assert!(out.windows(2).all(|w| w[0] < w[1]));
    debug_assert!(out.iter().all(|&p| p < l + k));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn valid_for_all_shapes() {
        for l in 1..40 {
            for k in 0..=l {
                for p in PlacementPolicy::ALL {
                    let idx = policy_indices(p, l, k).unwrap();
                    assert_eq!(idx.len(), k);
                    assert!(idx.windows(2).all(|w| w[0] < w[1]), "{p} {l} {k}");
                    assert!(idx.iter().all(|&i| i < l + k), "{p} {l} {k}");
                }
            }
        }
    }

    #[test]
    fn rejects_more_inserts_than_layers() {
        assert!(policy_indices(PlacementPolicy::Distributed, 2, 3).is_err());
    }

    #[test]
    fn names_round_trip() {
        for p in PlacementPolicy::ALL {
            assert_eq!(p.as_str().parse::<PlacementPolicy>().unwrap(), p);
        }
        assert_eq!("top-heavy".parse::<PlacementPolicy>().unwrap(), PlacementPolicy::TopHeavy);
    }
}
