//! Checkpoint files.
//!
//! Layout:
//!
//! ```text
//! magic   8 bytes   b"SVCKPT01"
//! hlen    u64 LE    length of the JSON header in bytes
//! header  hlen      UTF-8 JSON: spec, seed, epoch, frozen, tensors [{name, shape}]
//! blocks            f32 LE values of each tensor, in header (= name) order
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelSpec, Parameters};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"SVCKPT01";

#[derive(Debug, Serialize, Deserialize)]
struct TensorHeader {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    spec: ModelSpec,
    seed: u64,
    epoch: usize,
    frozen: BTreeSet<String>,
    tensors: Vec<TensorHeader>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub spec: ModelSpec,
    pub epoch: usize,
    pub params: Parameters,
}

pub fn encode_checkpoint(params: &Parameters, spec: &ModelSpec, epoch: usize) -> Result<Vec<u8>> {
    let header = Header {
        spec: spec.clone(),
        seed: params.init_seed,
        epoch,
        frozen: params.frozen.clone(),
        tensors: params
            .iter()
            .map(|(name, t)| TensorHeader {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + 4 * params.scalar_count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in params.iter() {
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("missing magic header"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(body)?;
    let mut pos = 16 + hlen;
    let mut tensors = BTreeMap::new();
    for th in header.tensors {
        let n: usize = th.shape.iter().product();
        let raw = bytes
            .get(pos..pos + 4 * n)
            .ok_or_else(|| bad(&format!("truncated data for {}", th.name)))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        pos += 4 * n;
        tensors.insert(th.name, Tensor::new(th.shape, data)?);
    }
    if pos != bytes.len() {
        return Err(bad("trailing bytes after parameter blocks"));
    }
    let mut params = Parameters::new(tensors, header.seed);
    params.frozen = header.frozen;
    Ok(Checkpoint {
        spec: header.spec,
        epoch: header.epoch,
        params,
    })
}

pub fn write_checkpoint(path: &Path, params: &Parameters, spec: &ModelSpec, epoch: usize) -> Result<()> {
    let bytes = encode_checkpoint(params, spec, epoch)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
