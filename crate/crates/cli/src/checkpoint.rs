//! Binary checkpoint format.
//!
//! Layout, all integers little-endian:
//!
//! | bytes      | content                                  |
//! |------------|------------------------------------------|
//! | 8          | magic `MIDUSCKP`                         |
//! | 4          | format version (`u32`)                   |
//! | 8          | header length `h` (`u64`)                |
//! | h          | JSON header                              |
//! | rest       | raw tensor data in header order          |
//!
//! The header holds the experiment config, the element type, block labels,
//! trainability masks, one `{name, shape, offset, len}` entry per tensor
//! (offsets in elements from the start of the data section) and the SHA-256
//! of the data section. Loading rebuilds the model skeleton from the config
//! and fills every tensor by name, so any shape disagreement is reported.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use midus::memory::RetrievalPath;
use midus::params::ParamTree;
use midus::transformer::Model;
use midus::{Precision, Scalar, Tensor};

use crate::config::ExperimentConfig;
use crate::error::CliError;
use crate::setup;

pub const MAGIC: &[u8; 8] = b"MIDUSCKP";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub dtype: Precision,
    pub config: ExperimentConfig,
    pub layout: Vec<String>,
    pub trainable: Vec<bool>,
    pub inserted: Vec<bool>,
    pub io_trainable: bool,
    pub retrieval: RetrievalPath,
    pub tensors: Vec<TensorEntry>,
    pub sha256: String,
}

/// A loaded model in whichever precision the file was written.
#[derive(Clone, Debug)]
pub enum AnyModel {
    F32(Model<f32>),
    F64(Model<f64>),
}

fn all_tensors<T: Scalar>(model: &Model<T>) -> Vec<(String, &Tensor<T>)> {
    let mut v = model.named();
    v.extend(model.buffers());
    v
}

/// SHA-256 over the little-endian bytes of the given tensors, in order.
pub fn digest<'a, T: Scalar + 'a>(tensors: impl IntoIterator<Item = &'a Tensor<T>>) -> String {
    let mut hasher = Sha256::new();
    let mut buf = Vec::new();
    for t in tensors {
        buf.clear();
        t.data().iter().for_each(|&x| x.write_le(&mut buf));
        hasher.update(&buf);
    }
    hex::encode(hasher.finalize())
}

pub fn to_bytes<T: Scalar>(cfg: &ExperimentConfig, model: &Model<T>) -> Result<Vec<u8>, CliError> {
    let tensors = all_tensors(model);
    let mut data = Vec::new();
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0;
    for (name, t) in &tensors {
        t.data().iter().for_each(|&x| x.write_le(&mut data));
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
            len: t.len(),
        });
        offset += t.len();
    }
    let mut config = cfg.clone();
    config.precision = T::PRECISION;
    let header = Header {
        dtype: T::PRECISION,
        config,
        layout: model.labels(),
        trainable: model.trainable.clone(),
        inserted: model.inserted.clone(),
        io_trainable: model.io_trainable,
        retrieval: model.retrieval,
        tensors: entries,
        sha256: hex::encode(Sha256::digest(&data)),
    };
    let json = serde_json::to_vec(&header).map_err(|e| CliError::Config(e.to_string()))?;
    let mut out = Vec::with_capacity(20 + json.len() + data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&data);
    Ok(out)
}

pub fn save<T: Scalar>(path: &Path, cfg: &ExperimentConfig, model: &Model<T>) -> Result<(), CliError> {
    let bytes = to_bytes(cfg, model)?;
    std::fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

/// Splits a checkpoint into its verified header and data section.
pub fn parse<'a>(path: &Path, bytes: &'a [u8]) -> Result<(Header, &'a [u8]), CliError> {
    let bad = |d: &str| CliError::checkpoint(path, d);
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(bad(&format!("unsupported format version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = &bytes[20..];
    if hlen > body.len() {
        return Err(bad("truncated header"));
    }
    let header: Header =
        serde_json::from_slice(&body[..hlen]).map_err(|e| bad(&format!("malformed header: {e}")))?;
    let data = &body[hlen..];
    if hex::encode(Sha256::digest(data)) != header.sha256 {
        return Err(bad("checksum mismatch"));
    }
    Ok((header, data))
}

fn copy_tensor<T: Scalar>(
    path: &Path,
    header: &Header,
    data: &[u8],
    name: &str,
    t: &mut Tensor<T>,
) -> Result<(), CliError> {
    let e = header
        .tensors
        .iter()
        .find(|e| e.name == name)
        .ok_or_else(|| CliError::checkpoint(path, format!("missing tensor {name}")))?;
    if e.shape != t.shape() {
        return Err(CliError::checkpoint(
            path,
            format!("tensor {name} has shape {:?}, expected {:?}", e.shape, t.shape()),
        ));
    }
    let src = &data[e.offset * T::BYTES..(e.offset + e.len) * T::BYTES];
    for (dst, chunk) in t.data_mut().iter_mut().zip(src.chunks_exact(T::BYTES)) {
        *dst = T::read_le(chunk);
    }
    Ok(())
}

fn fill<T: Scalar>(path: &Path, header: &Header, data: &[u8]) -> Result<Model<T>, CliError> {
    let bad = |d: String| CliError::checkpoint(path, d);
    if header.dtype != T::PRECISION {
        return Err(bad(format!("stored as {} but requested {}", header.dtype, T::PRECISION)));
    }
    header.config.validate()?;
    let mut model = setup::skeleton::<T>(&header.config)?;
    if model.labels() != header.layout {
        return Err(bad(format!(
            "block layout {:?} does not match its config ({:?})",
            header.layout,
            model.labels()
        )));
    }
    let expected = header.tensors.iter().map(|e| e.offset + e.len).max().unwrap_or(0) * T::BYTES;
    if data.len() != expected {
        return Err(bad(format!("data section has {} bytes, expected {expected}", data.len())));
    }
    let mut filled = 0;
    for (name, t) in model.named_mut() {
        copy_tensor(path, header, data, &name, t)?;
        filled += 1;
    }
    for (name, t) in model.buffers_mut() {
        copy_tensor(path, header, data, &name, t)?;
        filled += 1;
    }
    if filled != header.tensors.len() {
        return Err(bad(format!(
            "file has {} tensors, model expects {filled}",
            header.tensors.len()
        )));
    }
    if header.trainable.len() != model.depth() || header.inserted.len() != model.depth() {
        return Err(bad("trainability masks do not match block count".into()));
    }
    model.trainable = header.trainable.clone();
    model.inserted = header.inserted.clone();
    model.io_trainable = header.io_trainable;
    model.retrieval = header.retrieval;
    model.validate()?;
    Ok(model)
}

fn read(path: &Path) -> Result<Vec<u8>, CliError> {
    std::fs::read(path).map_err(|e| CliError::io(path, e))
}

/// Loads a checkpoint written in precision `T`.
pub fn load<T: Scalar>(path: &Path) -> Result<(ExperimentConfig, Model<T>), CliError> {
    let bytes = read(path)?;
    let (header, data) = parse(path, &bytes)?;
    let model = fill::<T>(path, &header, data)?;
    Ok((header.config, model))
}

/// Loads a checkpoint in its stored precision.
pub fn load_any(path: &Path) -> Result<(ExperimentConfig, AnyModel), CliError> {
    let bytes = read(path)?;
    let (header, data) = parse(path, &bytes)?;
    let model = match header.dtype {
        Precision::F32 => AnyModel::F32(fill(path, &header, data)?),
        Precision::F64 => AnyModel::F64(fill(path, &header, data)?),
    };
    Ok((header.config, model))
}
