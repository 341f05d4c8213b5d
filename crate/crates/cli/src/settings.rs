//! Defaults from a `--config` TOML file. Flags given on the command line
//! (or through the environment) take precedence.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::Deserialize;

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub scheme: Option<String>,
    pub k: Option<usize>,
    pub gamma: Option<f64>,
    pub delta: Option<f64>,
    pub ak_temperature: Option<f64>,
    pub message: Option<String>,
    pub temp: Option<f64>,
    pub nucleus_p: Option<f64>,
    pub seed: Option<u64>,
    pub vocab_size: Option<usize>,
    pub source_seed: Option<u64>,
    pub source_exponent: Option<f64>,
    pub teacher_docs: Option<usize>,
    pub docs: Option<usize>,
    pub doc_len: Option<usize>,
    pub order: Option<usize>,
    pub lambda: Option<f64>,
    pub mode: Option<String>,
    pub supervision: Option<String>,
    pub budget: Option<u64>,
    pub repetitions: Option<usize>,
    pub prompt_len: Option<usize>,
    pub max_tokens: Option<usize>,
    pub copy_prob: Option<f64>,
    pub copy_len: Option<usize>,
    pub chunk_docs: Option<usize>,
    pub endpoint: Option<String>,
    // rejected with a pointed message below
    key: Option<toml::Value>,
    api_token: Option<toml::Value>,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<(Self, Vec<u8>)> {
        let bytes = std::fs::read(path)
            .with_context(|| format!("reading config file {}", path.display()))?;
        let text = std::str::from_utf8(&bytes)
            .with_context(|| format!("config file {} is not UTF-8", path.display()))?;
        let cfg: ConfigFile = toml::from_str(text)
            .with_context(|| format!("parsing config file {}", path.display()))?;
        if cfg.key.is_some() || cfg.api_token.is_some() {
            bail!(
                "{}: secrets are not read from config files; use --key / RADIOSCOPE_KEY and RADIOSCOPE_API_TOKEN",
                path.display()
            );
        }
        Ok((cfg, bytes))
    }
}

/// `flag`, else the config value, else `default`.
pub fn pick<T>(flag: Option<T>, config: Option<T>, default: T) -> T {
    flag.or(config).unwrap_or(default)
}
