//! Run-directory bookkeeping: content hashes of every output.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};
use crate::results::SeedFailure;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.toml";
pub const RESULTS_FILE: &str = "results.json";
pub const REPORT_DIR: &str = "report";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    /// Relative to the run directory, `/`-separated.
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub experiment: String,
    pub seeds: Vec<u64>,
    pub config: String,
    pub config_sha256: String,
    pub failures: Vec<SeedFailure>,
    pub outputs: Vec<FileEntry>,
}

pub fn sha256_file(path: &Path) -> Result<(u64, String)> {
    let bytes = fs::read(path).map_err(CliError::io(path))?;
    Ok((bytes.len() as u64, hex::encode(Sha256::digest(&bytes))))
}

fn walk(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<_> = fs::read_dir(dir)
        .map_err(CliError::io(dir))?
        .collect::<std::io::Result<Vec<_>>>()
        .map_err(CliError::io(dir))?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let path = e.path();
        let rel = path.strip_prefix(root).expect("walk stays under root");
        if rel == Path::new(MANIFEST_FILE) || rel.starts_with(REPORT_DIR) {
            continue;
        }
        if path.is_dir() {
            walk(root, &path, out)?;
        } else {
            out.push(path);
        }
    }
    Ok(())
}

fn rel_string(root: &Path, path: &Path) -> String {
    let rel = path.strip_prefix(root).expect("under root");
    rel.components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join("/")
}

/// Hashes every file under `root` except the manifest and the report folder.
pub fn scan_outputs(root: &Path) -> Result<Vec<FileEntry>> {
    let mut files = Vec::new();
    walk(root, root, &mut files)?;
    let mut out = files
        .iter()
        .map(|p| {
            let (bytes, sha256) = sha256_file(p)?;
            Ok(FileEntry {
                path: rel_string(root, p),
                bytes,
                sha256,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    out.sort_by(|a, b| a.path.cmp(&b.path));
    Ok(out)
}

impl Manifest {
    pub fn write(&self, root: &Path) -> Result<()> {
        let path = root.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).map_err(|source| CliError::Json {
            path: path.clone(),
            source,
        })?;
        fs::write(&path, text + "\n").map_err(CliError::io(&path))
    }

    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        if !root.is_dir() {
            return Err(CliError::Usage(format!("{} is not a run directory", root.display())));
        }
        let text = fs::read_to_string(&path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => {
                CliError::Integrity(format!("no {MANIFEST_FILE} in {}; was it produced by `run`?", root.display()))
            }
            _ => CliError::Io { path: path.clone(), source: e },
        })?;
        let m: Manifest = serde_json::from_str(&text).map_err(|source| CliError::Json { path, source })?;
        if m.version != MANIFEST_VERSION {
            return Err(CliError::Integrity(format!("manifest version {} is not supported", m.version)));
        }
        Ok(m)
    }

    /// Every listed file exists with its recorded hash, and nothing is unlisted.
    pub fn verify(&self, root: &Path) -> Result<()> {
        let found = scan_outputs(root)?;
        if found != self.outputs {
            let listed: Vec<&str> = self.outputs.iter().map(|f| f.path.as_str()).collect();
            let bad: Vec<&str> = found
                .iter()
                .filter(|f| !self.outputs.contains(f))
                .map(|f| f.path.as_str())
                .chain(listed.iter().copied().filter(|p| !found.iter().any(|f| f.path == *p)))
                .collect();
            return Err(CliError::Integrity(format!("outputs differ from the manifest: {}", bad.join(", "))));
        }
        Ok(())
    }
}
