//! Artifact formats: stamped JSONL records and lineage checks.
//!
//! Every JSONL line carries `schema_version` and `config_hash` next to the
//! record's own fields. Keys are written in sorted order so identical records
//! give identical bytes.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{CapoError, Result};
use crate::pairing::{PairPool, Strategy};
use crate::reward::{CalibratedScores, CandidateSet, RewardKind, Samples};

pub const SCHEMA_VERSION: u32 = 1;

/// Provenance written into every artifact.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stamp {
    pub schema_version: u32,
    pub config_hash: String,
}

impl Stamp {
    pub fn new(config_hash: &str) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            config_hash: config_hash.to_string(),
        }
    }

    /// `schema_version=<v> config_hash=<h>`, used in CSV and SVG comments.
    pub fn comment(&self) -> String {
        format!(
            "schema_version={} config_hash={}",
            self.schema_version, self.config_hash
        )
    }
}

/// Calibrated candidates for one prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibratedRecord {
    pub prompt_id: String,
    pub samples: Samples,
    pub scores: Vec<Vec<f64>>,
    pub reward_names: Vec<String>,
    pub reward_kinds: Vec<RewardKind>,
    pub calibrated: Vec<Vec<f64>>,
    pub ensemble: Vec<f64>,
}

impl CalibratedRecord {
    pub fn new(set: CandidateSet, cal: CalibratedScores) -> Self {
        Self {
            prompt_id: set.prompt_id,
            samples: set.samples,
            scores: set.scores,
            reward_names: set.reward_names,
            reward_kinds: set.reward_kinds,
            calibrated: cal.calibrated,
            ensemble: cal.ensemble,
        }
    }

    pub fn scores(&self) -> CalibratedScores {
        CalibratedScores {
            calibrated: self.calibrated.clone(),
            ensemble: self.ensemble.clone(),
        }
    }
}

/// Selected positives and negatives for one prompt, with the candidate samples
/// so fine-tuning needs no other input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairPoolRecord {
    pub prompt_id: String,
    pub strategy: Strategy,
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
    /// Calibrated value each candidate is ranked by.
    pub ensemble: Vec<f64>,
    pub samples: Samples,
}

impl PairPoolRecord {
    pub fn new(pool: PairPool, samples: Samples) -> Self {
        Self {
            prompt_id: pool.prompt_id,
            strategy: pool.strategy,
            positives: pool.positives,
            negatives: pool.negatives,
            ensemble: pool.target,
            samples,
        }
    }

    pub fn pool(&self) -> PairPool {
        PairPool {
            prompt_id: self.prompt_id.clone(),
            strategy: self.strategy,
            positives: self.positives.clone(),
            negatives: self.negatives.clone(),
            target: self.ensemble.clone(),
        }
    }
}

/// Serializes records as stamped JSON lines.
pub fn to_jsonl<T: Serialize>(stamp: &Stamp, records: &[T]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        let mut map = match serde_json::to_value(r)? {
            Value::Object(m) => m,
            _ => Map::new(),
        };
        map.insert("schema_version".into(), stamp.schema_version.into());
        map.insert("config_hash".into(), stamp.config_hash.clone().into());
        out.push_str(&serde_json::to_string(&Value::Object(map))?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, stamp: &Stamp, records: &[T]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, to_jsonl(stamp, records)?)?;
    Ok(())
}

/// Reads stamped JSON lines. All lines must share one stamp with the current
/// schema version.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path, producer: &'static str) -> Result<(Stamp, Vec<T>)> {
    let text = read_artifact(path, producer)?;
    let malformed = |reason: String| CapoError::Malformed {
        path: path.to_path_buf(),
        reason,
    };
    let mut stamp: Option<Stamp> = None;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let mut map = match serde_json::from_str::<Value>(line)? {
            Value::Object(m) => m,
            _ => return Err(malformed(format!("line {} is not an object", i + 1))),
        };
        let version = map
            .remove("schema_version")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| malformed(format!("line {} has no schema_version", i + 1)))?;
        if version != u64::from(SCHEMA_VERSION) {
            return Err(CapoError::SchemaVersionMismatch {
                what: path.display().to_string(),
                expected: SCHEMA_VERSION,
                found: version as u32,
            });
        }
        let hash = match map.remove("config_hash") {
            Some(Value::String(s)) => s,
            _ => return Err(malformed(format!("line {} has no config_hash", i + 1))),
        };
        match &stamp {
            None => stamp = Some(Stamp::new(&hash)),
            Some(s) if s.config_hash != hash => {
                return Err(malformed(format!("line {} has a different config_hash", i + 1)))
            }
            Some(_) => {}
        }
        out.push(
            serde_json::from_value(Value::Object(map))
                .map_err(|e| malformed(format!("line {}: {e}", i + 1)))?,
        );
    }
    let stamp = stamp.ok_or_else(|| malformed("no records".into()))?;
    Ok((stamp, out))
}

/// Reads a file, mapping "not found" to a [`CapoError::MissingArtifact`] naming its producer.
pub fn read_artifact(path: &Path, producer: &'static str) -> Result<String> {
    fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => CapoError::MissingArtifact {
            path: path.to_path_buf(),
            producer,
        },
        _ => e.into(),
    })
}

/// Refuses artifacts produced under a different config unless forced.
pub fn check_lineage(what: &str, found: &str, expected: &str, force: bool) -> Result<()> {
    if found == expected || force {
        if found != expected {
            log::warn!("{what}: config hash {found} differs from {expected}; continuing (--force)");
        }
        Ok(())
    } else {
        Err(CapoError::LineageMismatch(format!(
            "{what} was produced with config {found}, current config is {expected}"
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jsonl_round_trip_and_stamp_checks() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        let set = CandidateSet {
            prompt_id: "p000".into(),
            samples: Samples::Vectors(vec![vec![0.1, 0.2], vec![0.3, 0.4]]),
            scores: vec![vec![1.0], vec![0.5]],
            reward_names: vec!["a".into()],
            reward_kinds: vec![RewardKind::BtLogit],
        };
        let stamp = Stamp::new("deadbeef");
        write_jsonl(&path, &stamp, &[set.clone(), set.clone()]).unwrap();
        let (s, back): (Stamp, Vec<CandidateSet>) = read_jsonl(&path, "gen-candidates").unwrap();
        assert_eq!(s, stamp);
        assert_eq!(back, vec![set.clone(), set]);

        let text = fs::read_to_string(&path)
            .unwrap()
            .replace("\"schema_version\":1", "\"schema_version\":9");
        fs::write(&path, text).unwrap();
        assert!(matches!(
            read_jsonl::<CandidateSet>(&path, "gen-candidates"),
            Err(CapoError::SchemaVersionMismatch { found: 9, .. })
        ));
        assert!(matches!(
            read_jsonl::<CandidateSet>(&dir.path().join("nope.jsonl"), "gen-candidates"),
            Err(CapoError::MissingArtifact {
                producer: "gen-candidates",
                ..
            })
        ));
    }

    #[test]
    fn lineage() {
        assert!(check_lineage("x", "a", "a", false).is_ok());
        assert!(matches!(
            check_lineage("x", "a", "b", false),
            Err(CapoError::LineageMismatch(_))
        ));
        assert!(check_lineage("x", "a", "b", true).is_ok());
    }
}
