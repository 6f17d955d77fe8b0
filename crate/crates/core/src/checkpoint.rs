//! Binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! | bytes | content |
//! |-------|---------|
//! | 8     | magic `NISERCKP` |
//! | 4     | format version (`u32`, currently 1) |
//! | 8     | header length `h` (`u64`) |
//! | h     | UTF-8 JSON header: model config, vocabulary, tensor names and shapes, free-form metadata |
//! | rest  | every tensor in header order, row-major, as `f64` |
//!
//! Values are widened to `f64` on save, so 32- and 64-bit parameters both
//! round-trip bit for bit.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::ItemVocab;
use crate::model::{ModelConfig, Parameters, PARAM_NAMES};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"NISERCKP";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub config: ModelConfig,
    pub vocab: ItemVocab,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub metadata: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub vocab: ItemVocab,
    pub params: Parameters<f64>,
    pub metadata: serde_json::Value,
}

pub fn to_bytes<T: Scalar>(
    config: &ModelConfig,
    vocab: &ItemVocab,
    params: &Parameters<T>,
    metadata: serde_json::Value,
) -> Result<Vec<u8>> {
    let header = Header {
        config: config.clone(),
        vocab: vocab.clone(),
        tensors: PARAM_NAMES
            .iter()
            .zip(params.tensors())
            .map(|(n, t)| TensorEntry {
                name: n.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
        metadata,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(20 + json.len() + params.tensors().iter().map(|t| t.len() * 8).sum::<usize>());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in params.tensors() {
        for v in t.data() {
            out.extend_from_slice(&v.as_f64().to_le_bytes());
        }
    }
    Ok(out)
}

fn take<'a>(buf: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if buf.len() < n {
        return Err(Error::Checkpoint("truncated file".into()));
    }
    let (head, rest) = buf.split_at(n);
    *buf = rest;
    Ok(head)
}

pub fn from_bytes(mut buf: &[u8]) -> Result<Checkpoint> {
    if take(&mut buf, 8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = u32::from_le_bytes(take(&mut buf, 4)?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let hlen = u64::from_le_bytes(take(&mut buf, 8)?.try_into().unwrap()) as usize;
    let mut header: Header =
        serde_json::from_slice(take(&mut buf, hlen)?).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
    header.vocab.reindex();
    if header.tensors.len() != PARAM_NAMES.len() {
        return Err(Error::Checkpoint(format!("expected {} tensors", PARAM_NAMES.len())));
    }
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for (entry, want) in header.tensors.iter().zip(PARAM_NAMES) {
        if entry.name != want {
            return Err(Error::Checkpoint(format!("expected tensor {want}, found {}", entry.name)));
        }
        let n: usize = entry.shape.iter().product();
        let raw = take(&mut buf, n * 8)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        tensors.push(Tensor::new(entry.shape.clone(), data)?);
    }
    if !buf.is_empty() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", buf.len())));
    }
    let params = Parameters::from_vec(tensors)?;
    if params.n_items() != header.vocab.len() {
        return Err(Error::Checkpoint(format!(
            "vocabulary has {} items but embeddings have {}",
            header.vocab.len(),
            params.n_items()
        )));
    }
    Ok(Checkpoint {
        config: header.config,
        vocab: header.vocab,
        params,
        metadata: header.metadata,
    })
}

pub fn save<T: Scalar>(
    path: &Path,
    config: &ModelConfig,
    vocab: &ItemVocab,
    params: &Parameters<T>,
    metadata: serde_json::Value,
) -> Result<()> {
    let bytes = to_bytes(config, vocab, params, metadata)?;
    let io = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    std::fs::File::create(path).and_then(|mut f| f.write_all(&bytes)).map_err(io)
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
    from_bytes(&bytes)
}
