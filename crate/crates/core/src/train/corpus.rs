use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Rng;

/// One training example: inputs, next-token targets and the positions that
/// count towards the loss.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sequence {
    pub tokens: Vec<usize>,
    pub targets: Vec<usize>,
    pub mask: Vec<bool>,
}

pub trait Corpus {
    fn vocab(&self) -> usize;
    /// Draws a sequence of `len` input tokens.
    fn sample(&self, rng: &mut Rng, len: usize) -> Result<Sequence>;
}

/// Byte-level text: every byte is a token.
#[derive(Clone, Debug)]
pub struct ByteCorpus {
    bytes: Vec<u8>,
}

impl ByteCorpus {
    pub fn new(bytes: Vec<u8>) -> Result<Self> {
        if bytes.len() < 2 {
            return Err(Error::Config("corpus needs at least two bytes".into()));
        }
        Ok(ByteCorpus { bytes })
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)
            .map_err(|e| Error::Config(format!("cannot read corpus {}: {e}", path.display())))?;
        Self::new(bytes)
    }
}

impl Corpus for ByteCorpus {
    fn vocab(&self) -> usize {
        256
    }

    fn sample(&self, rng: &mut Rng, len: usize) -> Result<Sequence> {
        if len + 1 > self.bytes.len() {
            return Err(Error::Config(format!(
                "corpus of {} bytes is shorter than sequence length {} + 1",
                self.bytes.len(),
                len
            )));
        }
        let start = rng.below(self.bytes.len() - len);
        let w: Vec<usize> = self.bytes[start..start + len + 1].iter().map(|&b| b as usize).collect();
        Ok(Sequence {
            tokens: w[..len].to_vec(),
            targets: w[1..].to_vec(),
            mask: vec![true; len],
        })
    }
}

/// Parameters of the synthetic key→value recall task.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecallSpec {
    pub keys: usize,
    pub values: usize,
    pub seed: u64,
}

impl Default for RecallSpec {
    fn default() -> Self {
        RecallSpec {
            keys: 128,
            values: 128,
            seed: 17,
        }
    }
}

/// Synthetic recall task: a fixed random map from key tokens `0..keys` to
/// value tokens `keys..keys+values`. Sequences are `k v k v …` with keys
/// drawn uniformly; only the value predictions count towards the loss, so
/// a model does well only by storing the map.
#[derive(Clone, Debug)]
pub struct RecallCorpus {
    spec: RecallSpec,
    map: Vec<usize>,
}

impl RecallCorpus {
    pub fn new(spec: RecallSpec) -> Result<Self> {
        if spec.keys == 0 || spec.values == 0 {
            return Err(Error::Config("recall corpus needs keys and values".into()));
        }
        let mut rng = Rng::new(spec.seed);
        let map = (0..spec.keys).map(|_| spec.keys + rng.below(spec.values)).collect();
        Ok(RecallCorpus { spec, map })
    }

    pub fn value_of(&self, key: usize) -> usize {
        self.map[key]
    }
}

impl Corpus for RecallCorpus {
    fn vocab(&self) -> usize {
        self.spec.keys + self.spec.values
    }

    fn sample(&self, rng: &mut Rng, len: usize) -> Result<Sequence> {
        let mut stream = Vec::with_capacity(len + 2);
        while stream.len() < len + 1 {
            let k = rng.below(self.spec.keys);
            stream.push(k);
            stream.push(self.map[k]);
        }
        let tokens = stream[..len].to_vec();
        let targets = stream[1..len + 1].to_vec();
        let mask = (0..len).map(|i| i % 2 == 0).collect();
        Ok(Sequence { tokens, targets, mask })
    }
}
