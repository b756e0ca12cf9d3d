//! Binary model checkpoints.
//!
//! Layout: the 8-byte magic `NFSCKPT\0`, a little-endian `u32` format
//! version, a little-endian `u64` header length, a JSON header describing the
//! configs, seed and tensor table, then every tensor's values as raw
//! little-endian `f64` in table order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::BatchNormState;
use crate::error::{Error, Result};
use crate::heads::{ComposedModel, HeadConfig};
use crate::nfs::NfsConfig;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"NFSCKPT\0";
pub const VERSION: u32 = 1;

const RUNNING_MEAN: &str = "bn.running_mean";
const RUNNING_VAR: &str = "bn.running_var";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    nfs: NfsConfig,
    head: HeadConfig,
    seq_len: usize,
    seed: u64,
    bn_initialized: bool,
    tensors: Vec<TensorEntry>,
}

/// A model together with the seed it was built from.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ComposedModel,
    pub seed: u64,
}

fn corrupt(detail: impl Into<String>) -> Error {
    Error::Checkpoint(detail.into())
}

pub fn to_bytes(model: &ComposedModel, seed: u64) -> Result<Vec<u8>> {
    let state = model.nfs.bn_state();
    let c = state.channels();
    let running = [
        (RUNNING_MEAN.to_string(), Tensor::new(vec![c], state.running_mean.clone())?),
        (RUNNING_VAR.to_string(), Tensor::new(vec![c], state.running_var.clone())?),
    ];
    let params = model.params();
    let all: Vec<(&str, &Tensor)> =
        params.iter().map(|(n, t)| (n.as_str(), *t)).chain(running.iter().map(|(n, t)| (n.as_str(), t))).collect();
    let header = Header {
        nfs: model.nfs.config().clone(),
        head: model.head_config.clone(),
        seq_len: model.seq_len,
        seed,
        bn_initialized: state.initialized,
        tensors: all.iter().map(|(n, t)| TensorEntry { name: n.to_string(), shape: t.shape().to_vec() }).collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let payload: usize = all.iter().map(|(_, t)| t.numel() * 8).sum();
    let mut out = Vec::with_capacity(20 + json.len() + payload);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in &all {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(corrupt("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(corrupt(format!("unsupported checkpoint version {version} (expected {VERSION})")));
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = &bytes[20..];
    if body.len() < header_len {
        return Err(corrupt("truncated header"));
    }
    let header: Header = serde_json::from_slice(&body[..header_len])?;
    let mut payload = &body[header_len..];

    let mut model = ComposedModel::build(header.nfs.clone(), header.head.clone(), header.seq_len, 0)?;
    let expected: Vec<(String, Vec<usize>)> = model
        .params()
        .into_iter()
        .map(|(n, t)| (n, t.shape().to_vec()))
        .chain([RUNNING_MEAN, RUNNING_VAR].map(|n| (n.to_string(), vec![header.nfs.bn_channels()])))
        .collect();
    let found: Vec<(String, Vec<usize>)> = header.tensors.iter().map(|e| (e.name.clone(), e.shape.clone())).collect();
    if expected != found {
        return Err(corrupt("tensor table does not match the stored configuration"));
    }

    let mut take = |numel: usize| -> Result<Vec<f64>> {
        if payload.len() < numel * 8 {
            return Err(corrupt("truncated tensor data"));
        }
        let (head, rest) = payload.split_at(numel * 8);
        payload = rest;
        Ok(head.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect())
    };
    for (_, p) in model.params_mut() {
        let values = take(p.numel())?;
        p.data_mut().copy_from_slice(&values);
    }
    let c = header.nfs.bn_channels();
    let running_mean = take(c)?;
    let running_var = take(c)?;
    if !payload.is_empty() {
        return Err(corrupt(format!("{} trailing bytes", payload.len())));
    }
    model.nfs.bn_state = BatchNormState { running_mean, running_var, initialized: header.bn_initialized };
    Ok(Checkpoint { model, seed: header.seed })
}

pub fn save(model: &ComposedModel, seed: u64, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(model, seed)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
}
