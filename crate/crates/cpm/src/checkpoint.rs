//! Checkpoint files: an 8-byte magic, a length-prefixed JSON header and
//! the named arrays in the core binary encoding, in header order.

use std::path::Path;

use cpm_core::diffcore::{codec, Array};
use cpm_core::train::{RunState, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil::{read, sha256_hex, write_atomic};
use crate::report::EpochRow;

const MAGIC: &[u8; 8] = b"CPMCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub config_hash: String,
    pub config: TrainConfig,
    pub epoch: usize,
    pub step: usize,
    pub adam_t: u64,
    /// Metrics of every completed epoch, so a resumed run rewrites the
    /// same CSV.
    pub history: Vec<EpochRow>,
    pub f32_arrays: Vec<String>,
    pub f64_arrays: Vec<String>,
}

pub fn config_hash(cfg: &TrainConfig) -> String {
    sha256_hex(&serde_json::to_vec(cfg).expect("config serialises"))
}

pub fn encode(cfg: &TrainConfig, state: &RunState, history: &[EpochRow]) -> Vec<u8> {
    let f32s = state.f32_arrays();
    let f64s = state.f64_arrays();
    let header = CheckpointHeader {
        format_version: CHECKPOINT_VERSION,
        config_hash: config_hash(cfg),
        config: cfg.clone(),
        epoch: state.epoch,
        step: state.step,
        adam_t: state.optimizer.t,
        history: history.to_vec(),
        f32_arrays: f32s.iter().map(|(n, _)| n.clone()).collect(),
        f64_arrays: f64s.iter().map(|(n, _)| n.clone()).collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serialises");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, a) in &f32s {
        codec::encode_f32(a, &mut out);
    }
    for (_, a) in &f64s {
        codec::encode_f64(a, &mut out);
    }
    out
}

pub fn save(path: &Path, cfg: &TrainConfig, state: &RunState, history: &[EpochRow]) -> Result<()> {
    write_atomic(path, &encode(cfg, state, history))
}

pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub state: RunState,
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let bad = |m: &str| Error::Format(format!("{}: {}", path.display(), m));
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let json = bytes
        .get(16..16 + len)
        .ok_or_else(|| bad("truncated header"))?;
    let value: serde_json::Value = serde_json::from_slice(json).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    let found = value
        .get("format_version")
        .and_then(|v| v.as_u64())
        .unwrap_or(0) as u32;
    if found != CHECKPOINT_VERSION {
        return Err(Error::Version {
            path: path.to_path_buf(),
            found,
            expected: CHECKPOINT_VERSION,
        });
    }
    let header: CheckpointHeader = serde_json::from_value(value).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    if config_hash(&header.config) != header.config_hash {
        return Err(bad("config hash does not match the stored config"));
    }
    let mut rest = &bytes[16 + len..];
    let f32s = header
        .f32_arrays
        .iter()
        .map(|n| Ok((n.clone(), codec::decode::<f32>(&mut rest)?)))
        .collect::<Result<Vec<(String, Array<f32>)>>>()?;
    let f64s = header
        .f64_arrays
        .iter()
        .map(|n| Ok((n.clone(), codec::decode::<f64>(&mut rest)?)))
        .collect::<Result<Vec<(String, Array<f64>)>>>()?;
    if !rest.is_empty() {
        return Err(bad("trailing bytes"));
    }
    let state = RunState::from_arrays(
        &header.config,
        &f32s,
        &f64s,
        header.epoch,
        header.step,
        header.adam_t,
    )?;
    Ok(Checkpoint { header, state })
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    decode(&read(path)?, path)
}
