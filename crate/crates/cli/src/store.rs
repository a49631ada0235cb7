//! Result files and the digest manifest.
//!
//! JSON results are wrapped in an envelope naming the config digest they came
//! from. Line-delimited files start with a header record carrying the same
//! digest. Nothing written here depends on wall-clock time.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use cotlab::LabError;

use crate::error::{CliError, Result};

pub const MANIFEST: &str = "manifest.json";

#[derive(Serialize, Deserialize)]
pub struct Envelope<T> {
    pub config_digest: String,
    pub kind: String,
    pub result: T,
}

#[derive(Serialize, Deserialize)]
struct LinesHeader {
    config_digest: String,
    kind: String,
    count: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_digest: String,
    /// Relative path → sha256 of the file contents.
    pub files: BTreeMap<String, String>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| LabError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Writes files under one output root and records their digests.
#[derive(Clone, Debug)]
pub struct Store {
    pub root: PathBuf,
    pub config_digest: String,
}

impl Store {
    pub fn new(root: impl Into<PathBuf>, config_digest: impl Into<String>) -> Self {
        Store {
            root: root.into(),
            config_digest: config_digest.into(),
        }
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn exists(&self, rel: &str) -> bool {
        self.path(rel).exists()
    }

    pub fn write_bytes(&self, rel: &str, bytes: &[u8]) -> Result<()> {
        let path = self.path(rel);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
        }
        let mut f = fs::File::create(&path).map_err(|e| LabError::io(&path, e))?;
        f.write_all(bytes).map_err(|e| LabError::io(&path, e))?;
        Ok(())
    }

    pub fn write_json<T: Serialize>(&self, rel: &str, kind: &str, value: &T) -> Result<()> {
        let env = Envelope {
            config_digest: self.config_digest.clone(),
            kind: kind.to_string(),
            result: value,
        };
        let mut bytes = serde_json::to_vec_pretty(&env).expect("results serialize");
        bytes.push(b'\n');
        self.write_bytes(rel, &bytes)
    }

    pub fn read_json<T: DeserializeOwned>(&self, rel: &str, kind: &str) -> Result<T> {
        let path = self.path(rel);
        if !path.exists() {
            return Err(CliError::Missing(vec![rel.to_string()]));
        }
        let bytes = fs::read(&path).map_err(|e| LabError::io(&path, e))?;
        let env: Envelope<T> =
            serde_json::from_slice(&bytes).map_err(|e| LabError::format(&path, e.to_string()))?;
        self.check(&path, &env.config_digest, &env.kind, kind)?;
        Ok(env.result)
    }

    pub fn write_lines<T: Serialize>(&self, rel: &str, kind: &str, records: &[T]) -> Result<()> {
        let header = LinesHeader {
            config_digest: self.config_digest.clone(),
            kind: kind.to_string(),
            count: records.len(),
        };
        let mut out = serde_json::to_vec(&header).expect("header serializes");
        out.push(b'\n');
        for r in records {
            serde_json::to_writer(&mut out, r).expect("records serialize");
            out.push(b'\n');
        }
        self.write_bytes(rel, &out)
    }

    pub fn read_lines<T: DeserializeOwned>(&self, rel: &str, kind: &str) -> Result<Vec<T>> {
        let path = self.path(rel);
        if !path.exists() {
            return Err(CliError::Missing(vec![rel.to_string()]));
        }
        let text = fs::read_to_string(&path).map_err(|e| LabError::io(&path, e))?;
        let mut lines = text.lines();
        let bad = |reason: String| CliError::from(LabError::format(&path, reason));
        let header: LinesHeader = serde_json::from_str(lines.next().unwrap_or(""))
            .map_err(|e| bad(format!("bad header: {e}")))?;
        self.check(&path, &header.config_digest, &header.kind, kind)?;
        let records = lines
            .map(|l| serde_json::from_str(l).map_err(|e| bad(e.to_string())))
            .collect::<Result<Vec<T>>>()?;
        if records.len() != header.count {
            return Err(bad(format!(
                "header promises {} records, found {}",
                header.count,
                records.len()
            )));
        }
        Ok(records)
    }

    fn check(&self, path: &Path, digest: &str, kind: &str, expected: &str) -> Result<()> {
        if kind != expected {
            return Err(LabError::format(path, format!("holds {kind}, expected {expected}")).into());
        }
        if digest != self.config_digest {
            return Err(LabError::format(
                path,
                format!("produced by config {digest}, current config is {}", self.config_digest),
            )
            .into());
        }
        Ok(())
    }

    pub fn manifest(&self) -> Result<Manifest> {
        let path = self.path(MANIFEST);
        if !path.exists() {
            return Ok(Manifest {
                config_digest: self.config_digest.clone(),
                files: BTreeMap::new(),
            });
        }
        let bytes = fs::read(&path).map_err(|e| LabError::io(&path, e))?;
        let m: Manifest =
            serde_json::from_slice(&bytes).map_err(|e| LabError::format(&path, e.to_string()))?;
        if m.config_digest != self.config_digest {
            return Err(LabError::format(
                &path,
                "output directory belongs to a different config; use a fresh --out",
            )
            .into());
        }
        Ok(m)
    }

    /// Re-hashes `files` and records them in the manifest.
    pub fn register(&self, files: &[String]) -> Result<()> {
        let mut m = self.manifest()?;
        for rel in files {
            m.files.insert(rel.clone(), sha256_file(&self.path(rel))?);
        }
        let mut bytes = serde_json::to_vec_pretty(&m).expect("manifest serializes");
        bytes.push(b'\n');
        self.write_bytes(MANIFEST, &bytes)
    }
}
