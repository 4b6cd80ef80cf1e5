//! Weight checkpoint container.
//!
//! Layout: 8-byte magic, `u32` LE format version, `u32` LE header length,
//! a JSON header, then every tensor's values as `f64` LE in header order.
//! Values are stored bit-for-bit, so a save/load round trip is exact.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::decomposer::{DecomposerConfig, DecomposerWeights};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::refiner::{BranchTag, RefinerBranch, RefinerConfig, RefinerWeights};
use crate::strategy::Strategy;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"LATREXW\0";
pub const FORMAT_VERSION: u32 = 1;

/// File names used when a refiner pair is written to a directory.
pub const REFINER_R_FILE: &str = "refiner_r.ckpt";
pub const REFINER_L_FILE: &str = "refiner_l.ckpt";
pub const DECOMPOSER_FILE: &str = "decomposer.ckpt";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Model {
    Decomposer(DecomposerConfig),
    Refiner {
        config: RefinerConfig,
        branch: BranchTag,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 4],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format_version: u32,
    pub strategy: Strategy,
    pub channels: usize,
    pub model: Model,
    pub tensors: Vec<TensorEntry>,
}

fn encode(model: Model, strategy: Strategy, channels: usize, params: &ParamStore) -> Vec<u8> {
    let header = Header {
        format_version: FORMAT_VERSION,
        strategy,
        channels,
        model,
        tensors: params
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.to_string(),
                shape: t.shape(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + json.len() + params.numel() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in params.iter() {
        out.extend_from_slice(&t.to_le_bytes());
    }
    out
}

fn take<'a>(bytes: &mut &'a [u8], n: usize, what: &str) -> Result<&'a [u8]> {
    if bytes.len() < n {
        return Err(Error::Checkpoint(format!("truncated while reading {what}")));
    }
    let (head, rest) = bytes.split_at(n);
    *bytes = rest;
    Ok(head)
}

fn read_u32(bytes: &mut &[u8], what: &str) -> Result<u32> {
    let b = take(bytes, 4, what)?;
    Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
}

/// Parses a checkpoint into its header and parameter store.
pub fn decode(mut bytes: &[u8]) -> Result<(Header, ParamStore)> {
    let bytes = &mut bytes;
    if take(bytes, MAGIC.len(), "magic")? != MAGIC {
        return Err(Error::Checkpoint(
            "not a latrex checkpoint (bad magic)".into(),
        ));
    }
    let version = read_u32(bytes, "format version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let len = read_u32(bytes, "header length")? as usize;
    let header: Header = serde_json::from_slice(take(bytes, len, "header")?)
        .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    if header.format_version != version {
        return Err(Error::Checkpoint(
            "header and preamble disagree on version".into(),
        ));
    }
    let mut params = ParamStore::new();
    for entry in &header.tensors {
        let n: usize = entry.shape.iter().product();
        let raw = take(bytes, n * 8, &entry.name)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        params.insert(entry.name.clone(), Tensor::from_vec(entry.shape, data)?);
    }
    if !bytes.is_empty() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len())));
    }
    Ok((header, params))
}

pub fn decomposer_to_bytes(w: &DecomposerWeights) -> Vec<u8> {
    let cfg = w.config();
    encode(
        Model::Decomposer(cfg),
        cfg.strategy,
        cfg.channels,
        &w.params,
    )
}

pub fn decomposer_from_bytes(bytes: &[u8]) -> Result<DecomposerWeights> {
    let (header, params) = decode(bytes)?;
    match header.model {
        Model::Decomposer(cfg) => DecomposerWeights::from_params(cfg, &params),
        Model::Refiner { .. } => Err(Error::Checkpoint(
            "expected a decomposer checkpoint, found a refiner".into(),
        )),
    }
}

pub fn refiner_branch_to_bytes(b: &RefinerBranch) -> Vec<u8> {
    let config = b.config();
    let model = Model::Refiner {
        config,
        branch: b.tag(),
    };
    encode(model, Strategy::Full, config.channels, &b.params)
}

pub fn refiner_branch_from_bytes(bytes: &[u8]) -> Result<RefinerBranch> {
    let (header, params) = decode(bytes)?;
    match header.model {
        Model::Refiner { config, branch } => RefinerBranch::from_params(config, branch, &params),
        Model::Decomposer(_) => Err(Error::Checkpoint(
            "expected a refiner checkpoint, found a decomposer".into(),
        )),
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn save_decomposer(path: &Path, w: &DecomposerWeights) -> Result<()> {
    write(path, &decomposer_to_bytes(w))
}

pub fn load_decomposer(path: &Path) -> Result<DecomposerWeights> {
    decomposer_from_bytes(&read(path)?)
}

pub fn save_refiner_branch(path: &Path, b: &RefinerBranch) -> Result<()> {
    write(path, &refiner_branch_to_bytes(b))
}

pub fn load_refiner_branch(path: &Path) -> Result<RefinerBranch> {
    refiner_branch_from_bytes(&read(path)?)
}

/// Writes both branches to `dir`; returns the two paths (R, L).
pub fn save_refiner(dir: &Path, w: &RefinerWeights) -> Result<(PathBuf, PathBuf)> {
    let (pr, pl) = (dir.join(REFINER_R_FILE), dir.join(REFINER_L_FILE));
    save_refiner_branch(&pr, &w.r)?;
    save_refiner_branch(&pl, &w.l)?;
    Ok((pr, pl))
}

/// Loads `refiner_r.ckpt` and `refiner_l.ckpt` from `dir`, checking that
/// each file carries the branch tag its name promises.
pub fn load_refiner(dir: &Path) -> Result<RefinerWeights> {
    let r = load_refiner_branch(&dir.join(REFINER_R_FILE))?;
    let l = load_refiner_branch(&dir.join(REFINER_L_FILE))?;
    if r.tag() != BranchTag::R || l.tag() != BranchTag::L {
        return Err(Error::Checkpoint(format!(
            "branch tags in {} are swapped or duplicated",
            dir.display()
        )));
    }
    if r.config() != l.config() {
        return Err(Error::Checkpoint(
            "refiner branches have different configs".into(),
        ));
    }
    Ok(RefinerWeights { r, l })
}
