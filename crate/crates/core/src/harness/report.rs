//! CSV tables and run manifests.

use std::collections::BTreeMap;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::artifact::{read_file, sha256_file, write_atomic};
use crate::error::{Error, Result};
use crate::harness::config::{LabConfig, StageSeeds};
use crate::harness::eval::EvalReport;
use crate::ppo::CurveRow;

/// Serializes `rows` with a header derived from `T`'s field names.
pub fn csv_bytes<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::usage(format!("csv encoding failed: {e}")))?;
    }
    w.into_inner().map_err(|e| Error::usage(format!("csv encoding failed: {e}")))
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    write_atomic(path, &csv_bytes(rows)?)
}

/// Parses a headed CSV. Malformed records report their 1-based line number;
/// a file without data rows is an error.
pub fn parse_csv<T: DeserializeOwned>(bytes: &[u8], path: &str) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_reader(bytes);
    let mut rows = Vec::new();
    for rec in r.deserialize() {
        let row: T = rec.map_err(|e| {
            let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
            Error::Csv { path: path.into(), line, message: e.to_string() }
        })?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Csv { path: path.into(), line: 1, message: "no data rows".into() });
    }
    Ok(rows)
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    parse_csv(&read_file(path)?, &path.display().to_string())
}

pub fn write_curve(path: &Path, curve: &[CurveRow]) -> Result<()> {
    if curve.is_empty() {
        // Header only, so zero-iteration runs still leave a parseable schema.
        let header = crate::ppo::CURVE_HEADER.join(",") + "\n";
        return write_atomic(path, header.as_bytes());
    }
    write_csv(path, curve)
}

/// Per-scene evaluation rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub scene_id: String,
    pub episodes: usize,
    pub successes: usize,
    pub success_rate: f64,
    pub mean_tf: Option<f64>,
}

pub fn eval_rows(report: &EvalReport) -> Vec<EvalRow> {
    report
        .scenes
        .iter()
        .map(|s| EvalRow {
            scene_id: s.scene_id.clone(),
            episodes: s.episodes,
            successes: s.successes,
            success_rate: s.success_rate,
            mean_tf: s.mean_tf,
        })
        .collect()
}

/// Everything needed to re-run the command that produced a directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool_version: String,
    pub command: Vec<String>,
    pub config: LabConfig,
    pub seeds: StageSeeds,
    /// Input files by path, with their sha256.
    pub inputs: BTreeMap<String, String>,
    /// Output files relative to the manifest, with their sha256.
    pub artifacts: BTreeMap<String, String>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl Manifest {
    pub fn new(command: Vec<String>, config: &LabConfig) -> Self {
        Manifest {
            tool_version: env!("CARGO_PKG_VERSION").into(),
            command,
            config: config.clone(),
            seeds: config.seeds(),
            inputs: BTreeMap::new(),
            artifacts: BTreeMap::new(),
        }
    }

    pub fn add_input(&mut self, path: &Path) -> Result<()> {
        self.inputs.insert(path.display().to_string(), sha256_file(path)?);
        Ok(())
    }

    /// Hashes `rel` under `dir` and records it.
    pub fn add_artifact(&mut self, dir: &Path, rel: &str) -> Result<()> {
        self.artifacts.insert(rel.into(), sha256_file(&dir.join(rel))?);
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        write_atomic(&dir.join(MANIFEST_FILE), &bytes)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        serde_json::from_slice(&read_file(&path)?)
            .map_err(|e| Error::Format { path: path.display().to_string(), message: e.to_string() })
    }
}
