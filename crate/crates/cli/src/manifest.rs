//! `manifest.json`: what was run, on which inputs, producing which files.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const FILE_NAME: &str = "manifest.json";

/// Flags whose value is never recorded.
const SECRET_FLAGS: [&str; 2] = ["--key", "--api-token"];

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct FileHash {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: Vec<String>,
    pub config_sha256: Option<String>,
    /// Hash of `settings`, the effective parameters after merging flags,
    /// config file and defaults.
    pub settings_sha256: String,
    pub settings: serde_json::Value,
    pub inputs: Vec<FileHash>,
    pub outputs: Vec<FileHash>,
    pub key_fingerprints: Vec<String>,
    pub started_unix: u64,
    pub finished_unix: u64,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

pub fn hash_file(path: &Path) -> Result<FileHash> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(FileHash {
        path: path.to_path_buf(),
        sha256: sha256_hex(&bytes),
    })
}

fn now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

/// The command line with secret flag values replaced.
pub fn redact(args: &[String]) -> Vec<String> {
    let mut out = Vec::with_capacity(args.len());
    let mut hide_next = false;
    for a in args {
        if hide_next {
            out.push("<redacted>".to_string());
            hide_next = false;
            continue;
        }
        match SECRET_FLAGS.iter().find(|f| a.starts_with(*f)) {
            Some(f) if a == f => {
                out.push(a.clone());
                hide_next = true;
            }
            Some(f) if a[f.len()..].starts_with('=') => out.push(format!("{f}=<redacted>")),
            _ => out.push(a.clone()),
        }
    }
    out
}

impl Manifest {
    pub fn start(settings: &impl Serialize, config: Option<&[u8]>) -> Result<Self> {
        let settings = serde_json::to_value(settings)?;
        Ok(Manifest {
            tool: "radioscope",
            version: env!("CARGO_PKG_VERSION"),
            command: redact(&std::env::args().collect::<Vec<_>>()),
            config_sha256: config.map(sha256_hex),
            settings_sha256: sha256_hex(serde_json::to_string(&settings)?.as_bytes()),
            settings,
            inputs: Vec::new(),
            outputs: Vec::new(),
            key_fingerprints: Vec::new(),
            started_unix: now(),
            finished_unix: 0,
        })
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.push(hash_file(path)?);
        Ok(())
    }

    pub fn output(&mut self, path: &Path) -> Result<()> {
        self.outputs.push(hash_file(path)?);
        Ok(())
    }

    pub fn key(&mut self, fingerprint: String) {
        if !self.key_fingerprints.contains(&fingerprint) {
            self.key_fingerprints.push(fingerprint);
        }
    }

    pub fn write(mut self, out_dir: &Path) -> Result<PathBuf> {
        self.finished_unix = now();
        let path = out_dir.join(FILE_NAME);
        std::fs::write(&path, serde_json::to_string_pretty(&self)? + "\n")
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}
