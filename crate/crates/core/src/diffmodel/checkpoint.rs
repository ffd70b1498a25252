//! Binary checkpoint format.
//!
//! ```text
//! b"CAPOCKPT"            8 bytes
//! header length          u64 little-endian
//! header                 UTF-8 JSON
//! parameters             num_params x f64 little-endian
//! ```
//!
//! Trainable and reference snapshots share the format.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Arch, Denoiser};
use crate::error::{CapoError, Result};
use crate::io::SCHEMA_VERSION;
use crate::schedule::{NoiseSchedule, ScheduleSpec};

const MAGIC: &[u8; 8] = b"CAPOCKPT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub schema_version: u32,
    pub arch: Arch,
    pub schedule: ScheduleSpec,
    pub seed: u64,
    pub step: u64,
    pub config_hash: String,
    pub num_params: usize,
}

/// Provenance stored alongside the parameters.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub step: u64,
    pub config_hash: String,
}

pub fn to_bytes(net: &Denoiser, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    let header = CheckpointHeader {
        schema_version: SCHEMA_VERSION,
        arch: net.arch().clone(),
        schedule: net.schedule().spec().clone(),
        seed: meta.seed,
        step: meta.step,
        config_hash: meta.config_hash.clone(),
        num_params: net.params().len(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + 8 * header.num_params);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for w in net.params() {
        out.extend_from_slice(&w.to_le_bytes());
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<(CheckpointHeader, Denoiser)> {
    let bad = |reason: &str| CapoError::Malformed {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(16..).ok_or_else(|| bad("truncated"))?;
    if body.len() < len {
        return Err(bad("truncated header"));
    }
    let header: CheckpointHeader =
        serde_json::from_slice(&body[..len]).map_err(|e| bad(&format!("header: {e}")))?;
    if header.schema_version != SCHEMA_VERSION {
        return Err(CapoError::SchemaVersionMismatch {
            what: path.display().to_string(),
            expected: SCHEMA_VERSION,
            found: header.schema_version,
        });
    }
    let data = &body[len..];
    if data.len() != 8 * header.num_params || header.num_params != header.arch.num_params() {
        return Err(bad("parameter block does not match the architecture"));
    }
    let theta = data
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let schedule = NoiseSchedule::new(header.schedule.clone())?;
    let net = Denoiser::from_parts(header.arch.clone(), schedule, theta)?;
    Ok((header, net))
}

pub fn save(path: &Path, net: &Denoiser, meta: &CheckpointMeta) -> Result<()> {
    fs::write(path, to_bytes(net, meta)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(CheckpointHeader, Denoiser)> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => CapoError::MissingArtifact {
            path: path.to_path_buf(),
            producer: "pretrain",
        },
        _ => e.into(),
    })?;
    from_bytes(&bytes, path)
}

impl From<&CheckpointHeader> for CheckpointMeta {
    fn from(h: &CheckpointHeader) -> Self {
        Self {
            seed: h.seed,
            step: h.step,
            config_hash: h.config_hash.clone(),
        }
    }
}
