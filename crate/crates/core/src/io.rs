//! Binary tensor files, checkpoints and run manifests.
//!
//! Tensor file layout, all little-endian:
//!
//! | bytes        | content                        |
//! |--------------|--------------------------------|
//! | 4            | magic `GTEN`                   |
//! | 4            | `u32` rank                     |
//! | 8 × rank     | `u64` dims                     |
//! | 4            | `u32` dtype code, `0` = f64    |
//! | 8 × product  | `f64` payload, row-major       |
//!
//! A checkpoint is a directory holding `manifest.json` (name → shape for
//! every parameter), `raw/` and `ema/` with one tensor file per parameter,
//! and `config.txt`.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"GTEN";
pub const DTYPE_F64: u32 = 0;

pub fn encode_tensor(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 8 * t.shape().len() + 8 * t.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    out.extend_from_slice(&DTYPE_F64.to_le_bytes());
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn take<'a>(bytes: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if bytes.len() < n {
        return Err(Error::Format("tensor file truncated".into()));
    }
    let (head, rest) = bytes.split_at(n);
    *bytes = rest;
    Ok(head)
}

fn take_u32(bytes: &mut &[u8]) -> Result<u32> {
    Ok(u32::from_le_bytes(take(bytes, 4)?.try_into().expect("4 bytes")))
}

fn take_u64(bytes: &mut &[u8]) -> Result<u64> {
    Ok(u64::from_le_bytes(take(bytes, 8)?.try_into().expect("8 bytes")))
}

pub fn decode_tensor(mut bytes: &[u8]) -> Result<Tensor> {
    let b = &mut bytes;
    if take(b, 4)? != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let rank = take_u32(b)? as usize;
    if rank == 0 || rank > 8 {
        return Err(Error::Format(format!("unsupported rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(usize::try_from(take_u64(b)?).map_err(|_| Error::Format("dimension overflow".into()))?);
    }
    let dtype = take_u32(b)?;
    if dtype != DTYPE_F64 {
        return Err(Error::Format(format!("unsupported dtype code {dtype}")));
    }
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format("element count overflow".into()))?;
    if b.len() != n * 8 {
        return Err(Error::Format(format!("payload holds {} bytes, expected {}", b.len(), n * 8)));
    }
    let data = b.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    Tensor::new(&shape, data)
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    fs::File::create(path)?.write_all(&encode_tensor(t))?;
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_tensor(&bytes)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub decay: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub steps: usize,
    pub params: Vec<ParamEntry>,
}

fn write_store(dir: &Path, store: &ParamStore) -> Result<()> {
    fs::create_dir_all(dir)?;
    for p in store.iter() {
        write_tensor(&dir.join(format!("{}.bin", p.name)), &p.value)?;
    }
    Ok(())
}

fn read_store(dir: &Path, entries: &[ParamEntry]) -> Result<ParamStore> {
    let mut parts = Vec::with_capacity(entries.len());
    for e in entries {
        let t = read_tensor(&dir.join(format!("{}.bin", e.name)))?;
        if t.shape() != e.shape.as_slice() {
            return Err(Error::Format(format!("{} has shape {:?}, manifest says {:?}", e.name, t.shape(), e.shape)));
        }
        parts.push((e.name.clone(), t, e.decay));
    }
    Ok(ParamStore::from_parts(parts))
}

pub fn save_checkpoint(dir: &Path, config: &Config, steps: usize, raw: &ParamStore, ema: &ParamStore) -> Result<()> {
    fs::create_dir_all(dir)?;
    let manifest = CheckpointManifest {
        steps,
        params: raw
            .iter()
            .map(|p| ParamEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                decay: p.decay,
            })
            .collect(),
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(dir.join("manifest.json"), json)?;
    fs::write(dir.join("config.txt"), config.to_text())?;
    write_store(&dir.join("raw"), raw)?;
    write_store(&dir.join("ema"), ema)?;
    Ok(())
}

pub struct Checkpoint {
    pub config: Config,
    pub steps: usize,
    pub raw: ParamStore,
    pub ema: ParamStore,
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let text = fs::read_to_string(dir.join("manifest.json"))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text).map_err(|e| Error::Format(e.to_string()))?;
    let config = Config::parse(&fs::read_to_string(dir.join("config.txt"))?)?;
    Ok(Checkpoint {
        steps: manifest.steps,
        raw: read_store(&dir.join("raw"), &manifest.params)?,
        ema: read_store(&dir.join("ema"), &manifest.params)?,
        config,
    })
}

/// Hex SHA-256 of the crate name and version, identifying the code that
/// produced a run.
pub fn code_hash() -> String {
    let digest = Sha256::digest(format!("{} {}", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION")).as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// One JSON document per run.
#[derive(Clone, Debug, Serialize)]
pub struct RunManifest<M: Serialize, R: Serialize> {
    pub command: String,
    pub seed: u64,
    pub code_hash: String,
    pub config: Vec<(String, String)>,
    pub metrics: Vec<M>,
    pub stage_ms: Vec<(String, f64)>,
    pub result: R,
}

impl<M: Serialize, R: Serialize> RunManifest<M, R> {
    pub fn new(command: &str, config: &Config, metrics: Vec<M>, stage_ms: Vec<(String, f64)>, result: R) -> Self {
        RunManifest {
            command: command.to_string(),
            seed: config.seed,
            code_hash: code_hash(),
            config: config.pairs().into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
            metrics,
            stage_ms,
            result,
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))?;
        fs::write(path, json)?;
        Ok(())
    }
}
