//! JSON-lines manifests, one utterance per line.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};

pub const MAX_REFERENCES: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub id: String,
    /// Relative paths resolve against the manifest's directory.
    pub feats_path: PathBuf,
    /// Space-separated phone labels.
    pub phones: String,
    pub target: String,
    /// Evaluation references; `target` is used when empty.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub references: Vec<String>,
}

impl ManifestRecord {
    pub fn references(&self) -> Vec<&str> {
        if self.references.is_empty() {
            vec![self.target.as_str()]
        } else {
            self.references.iter().map(String::as_str).collect()
        }
    }
}

/// Reads a manifest, resolving feature paths and checking id uniqueness and
/// reference counts. Feature files themselves are not opened.
pub fn read(path: &Path) -> Result<Vec<ManifestRecord>> {
    let text = fs::read_to_string(path).at(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut seen = HashSet::new();
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut r: ManifestRecord = serde_json::from_str(line)
            .map_err(|e| Error::data(format!("{}:{}: {e}", path.display(), i + 1)))?;
        if !seen.insert(r.id.clone()) {
            return Err(Error::data(format!("{}:{}: duplicate id {}", path.display(), i + 1, r.id)));
        }
        if r.references.len() > MAX_REFERENCES {
            return Err(Error::data(format!(
                "{}:{}: {} references, at most {MAX_REFERENCES} allowed",
                path.display(),
                i + 1,
                r.references.len()
            )));
        }
        if r.feats_path.is_relative() {
            r.feats_path = base.join(&r.feats_path);
        }
        records.push(r);
    }
    Ok(records)
}

/// Writes records as given; callers choose relative or absolute feature paths.
pub fn write(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).expect("records serialize");
        out.write_all(b"\n").expect("in-memory write");
    }
    fs::write(path, out).at(path)
}
