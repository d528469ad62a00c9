// SPDX-License-Identifier: MIT OR Apache-2.0

//! Provenance records: tool version, seed, and SHA-256 of every input.
//! Nothing time- or machine-dependent goes in, so reruns are byte-identical.

use std::collections::BTreeMap;
use std::path::Path;

use depthlens::io::write_atomic;
use depthlens::report::ReportTable;
use sha2::{Digest, Sha256};

use crate::{data, CliResult, Failure};

pub struct Provenance {
    entries: BTreeMap<String, String>,
}

impl Provenance {
    pub fn new(seed: u64) -> Self {
        let mut entries = BTreeMap::new();
        entries.insert("tool".into(), format!("depthlens {}", depthlens::VERSION));
        entries.insert("seed".into(), seed.to_string());
        Self { entries }
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        self.entries.insert(key.into(), value.into());
    }

    pub fn command(&mut self, name: &str) {
        self.set("command", name);
    }

    pub fn input(&mut self, key: &str, path: &Path, bytes: &[u8]) {
        self.set(
            key,
            format!("{} sha256:{}", base_name(path), hex::encode(Sha256::digest(bytes))),
        );
    }

    pub fn file_input(&mut self, key: &str, path: &Path) -> CliResult {
        let bytes = std::fs::read(path).map_err(|e| data(format!("{}: {e}", path.display())))?;
        self.input(key, path, &bytes);
        Ok(())
    }

    /// Hashes a dump directory: each regular file's name and contents,
    /// in name order.
    pub fn dump_input(&mut self, dir: &Path) -> CliResult {
        let hash = hash_dir(dir).map_err(|e| data(format!("{}: {e}", dir.display())))?;
        self.set("dump", format!("{} sha256:{hash}", base_name(dir)));
        Ok(())
    }

    pub fn entries(&self) -> BTreeMap<String, String> {
        self.entries.clone()
    }

    pub fn stamp(&self, table: &mut ReportTable) {
        for (k, v) in &self.entries {
            table.set_provenance(k, v.clone());
        }
    }

    /// Writes `<artifact>.provenance.json` next to `artifact`.
    pub fn write_sidecar(&self, artifact: &Path) -> CliResult {
        let mut name = artifact.file_name().unwrap_or_default().to_os_string();
        name.push(".provenance.json");
        let mut json = serde_json::to_string_pretty(&self.entries).expect("string map serializes");
        json.push('\n');
        write_atomic(&artifact.with_file_name(name), json.as_bytes()).map_err(Failure::from)
    }
}

/// Inputs are identified by content hash; only the final path component
/// is kept so artifacts do not depend on where files live.
fn base_name(path: &Path) -> String {
    path.file_name()
        .map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().into_owned())
}

fn hash_dir(dir: &Path) -> std::io::Result<String> {
    let mut files = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let entry = entry?;
        if entry.file_type()?.is_file() {
            files.push(entry.file_name());
        }
    }
    files.sort();
    let mut hasher = Sha256::new();
    for name in files {
        let bytes = std::fs::read(dir.join(&name))?;
        let name = name.to_string_lossy();
        hasher.update((name.len() as u64).to_le_bytes());
        hasher.update(name.as_bytes());
        hasher.update((bytes.len() as u64).to_le_bytes());
        hasher.update(&bytes);
    }
    Ok(hex::encode(hasher.finalize()))
}
