//! Checkpoint container.
//!
//! Layout: the 8-byte magic `DASMILCK`, a little-endian `u64` header length,
//! a UTF-8 JSON header, then every parameter's values as little-endian `f64`
//! in header order.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DASMILCK";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub params: Vec<ParamEntry>,
    /// Free-form hyperparameters (model/train config echo).
    pub hyperparameters: serde_json::Value,
    pub seed: u64,
}

pub fn write_checkpoint<W: Write>(
    mut out: W,
    store: &ParamStore,
    hyperparameters: serde_json::Value,
    seed: u64,
) -> Result<()> {
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        params: store
            .iter()
            .map(|(_, p)| ParamEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                trainable: p.trainable,
            })
            .collect(),
        hyperparameters,
        seed,
    };
    let json = serde_json::to_vec(&header)?;
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_all(&(json.len() as u64).to_le_bytes())?;
    out.write_all(&json)?;
    for (_, p) in store.iter() {
        for v in p.value.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut input: R) -> Result<(CheckpointHeader, ParamStore)> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    let fmt = |offset: usize, msg: &str| Error::Format { offset, msg: msg.to_string() };

    if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(fmt(0, "missing DASMILCK magic"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = 16usize
        .checked_add(hlen)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| fmt(8, "header length runs past end of file"))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[16..body])?;
    if header.format_version != FORMAT_VERSION {
        return Err(fmt(16, &format!("unsupported checkpoint version {}", header.format_version)));
    }

    let mut store = ParamStore::new();
    let mut pos = body;
    for entry in &header.params {
        let n: usize = entry.shape.iter().product();
        let end = pos + 8 * n;
        if end > bytes.len() {
            return Err(fmt(pos, &format!("truncated values for {}", entry.name)));
        }
        let values = bytes[pos..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let id = store.add(entry.name.clone(), Tensor::new(entry.shape.clone(), values)?)?;
        store.set_trainable(id, entry.trainable);
        pos = end;
    }
    if pos != bytes.len() {
        return Err(fmt(pos, "trailing bytes after parameter data"));
    }
    Ok((header, store))
}

pub fn save_checkpoint(
    path: &Path,
    store: &ParamStore,
    hyperparameters: serde_json::Value,
    seed: u64,
) -> Result<()> {
    let file = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_checkpoint(file, store, hyperparameters, seed)
}

pub fn load_checkpoint(path: &Path) -> Result<(CheckpointHeader, ParamStore)> {
    read_checkpoint(std::io::BufReader::new(std::fs::File::open(path)?))
}
