//! Service configuration: a TOML file, then `LINEAGE_*` environment
//! overrides, then command-line flags.
//!
//! ```toml
//! [ls]
//! listen = "127.0.0.1:7400"
//! data_dir = "ls-data"
//! key = "ls.key"
//! cards = ["a1.card.json", "a2.card.json"]
//! registry = "registry.json"
//! registry_authority = "ed25519:…"
//!
//! [ps]
//! listen = "127.0.0.1:7500"
//! key = "ps.key"
//! cache_ttl_ms = 2000
//! baseline = "ps-baseline.json"
//!
//! [[ps.upstreams]]
//! log_id = "…"
//! base_url = "http://127.0.0.1:7400"
//! public_key = "ed25519:…"
//! ```
//!
//! Relative paths are resolved against the config file's directory.

use std::env;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use lineage_core::{LogId, PublicKey};
use serde::Deserialize;

pub const CONFIG_ENV: &str = "LINEAGE_CONFIG";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: {source}")]
    Parse { path: PathBuf, source: toml::de::Error },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    #[serde(default)]
    pub ls: LsConfig,
    #[serde(default)]
    pub ps: PsConfig,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LsConfig {
    #[serde(default = "default_ls_listen")]
    pub listen: String,
    /// In-memory log when unset.
    pub data_dir: Option<PathBuf>,
    pub key: Option<PathBuf>,
    #[serde(default)]
    pub cards: Vec<PathBuf>,
    pub registry: Option<PathBuf>,
    pub registry_authority: Option<PublicKey>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PsConfig {
    #[serde(default = "default_ps_listen")]
    pub listen: String,
    pub key: Option<PathBuf>,
    #[serde(default = "default_ttl")]
    pub cache_ttl_ms: u64,
    pub baseline: Option<PathBuf>,
    #[serde(default)]
    pub upstreams: Vec<UpstreamConfig>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UpstreamConfig {
    pub log_id: Option<LogId>,
    pub base_url: String,
    pub public_key: PublicKey,
}

impl UpstreamConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        match self.log_id {
            Some(id) if id != LogId::for_key(self.public_key.as_bytes()) => {
                Err(ConfigError::Invalid(format!("upstream {}: log_id {id} does not match its key", self.base_url)))
            }
            _ => Ok(()),
        }
    }
}

fn default_ls_listen() -> String {
    "127.0.0.1:7400".into()
}

fn default_ps_listen() -> String {
    "127.0.0.1:7500".into()
}

fn default_ttl() -> u64 {
    2000
}

impl Default for LsConfig {
    fn default() -> Self {
        LsConfig {
            listen: default_ls_listen(),
            data_dir: None,
            key: None,
            cards: Vec::new(),
            registry: None,
            registry_authority: None,
        }
    }
}

impl Default for PsConfig {
    fn default() -> Self {
        PsConfig {
            listen: default_ps_listen(),
            key: None,
            cache_ttl_ms: default_ttl(),
            baseline: None,
            upstreams: Vec::new(),
        }
    }
}

impl Config {
    /// Loads `path`, or the file named by `LINEAGE_CONFIG`, or defaults;
    /// then applies environment overrides.
    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        let path = path.map(Path::to_path_buf).or_else(|| env::var_os(CONFIG_ENV).map(PathBuf::from));
        let mut cfg = match &path {
            Some(p) => Self::from_file(p)?,
            None => Config::default(),
        };
        cfg.apply_env(|k| env::var(k).ok())?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.into(), source })?;
        let mut cfg: Config =
            toml::from_str(&text).map_err(|source| ConfigError::Parse { path: path.into(), source })?;
        if let Some(dir) = path.parent() {
            cfg.resolve(dir);
        }
        Ok(cfg)
    }

    fn resolve(&mut self, dir: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        };
        self.ls.data_dir.iter_mut().chain(&mut self.ls.key).chain(&mut self.ls.registry).for_each(fix);
        self.ls.cards.iter_mut().for_each(fix);
        self.ps.key.iter_mut().chain(&mut self.ps.baseline).for_each(fix);
    }

    /// `LINEAGE_LS_LISTEN`, `LINEAGE_LS_DATA_DIR`, `LINEAGE_LS_KEY`,
    /// `LINEAGE_PS_LISTEN`, `LINEAGE_PS_KEY`, `LINEAGE_PS_CACHE_TTL_MS`.
    pub fn apply_env(&mut self, var: impl Fn(&str) -> Option<String>) -> Result<(), ConfigError> {
        if let Some(v) = var("LINEAGE_LS_LISTEN") {
            self.ls.listen = v;
        }
        if let Some(v) = var("LINEAGE_LS_DATA_DIR") {
            self.ls.data_dir = Some(v.into());
        }
        if let Some(v) = var("LINEAGE_LS_KEY") {
            self.ls.key = Some(v.into());
        }
        if let Some(v) = var("LINEAGE_PS_LISTEN") {
            self.ps.listen = v;
        }
        if let Some(v) = var("LINEAGE_PS_KEY") {
            self.ps.key = Some(v.into());
        }
        if let Some(v) = var("LINEAGE_PS_CACHE_TTL_MS") {
            self.ps.cache_ttl_ms =
                v.parse().map_err(|_| ConfigError::Invalid(format!("LINEAGE_PS_CACHE_TTL_MS: not a number: {v}")))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    #[test]
    fn file_then_env() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lineage.toml");
        fs::write(
            &path,
            "[ls]\ndata_dir = \"data\"\nkey = \"/abs/ls.key\"\n[ps]\ncache_ttl_ms = 0\n\
             [[ps.upstreams]]\nbase_url = \"http://x\"\npublic_key = \"ed25519:0000000000000000000000000000000000000000000000000000000000000000\"\n",
        )
        .unwrap();
        let mut cfg = Config::from_file(&path).unwrap();
        assert_eq!(cfg.ls.data_dir.as_deref(), Some(dir.path().join("data").as_path()));
        assert_eq!(cfg.ls.key.as_deref(), Some(Path::new("/abs/ls.key")));
        assert_eq!(cfg.ls.listen, "127.0.0.1:7400");
        assert_eq!(cfg.ps.cache_ttl_ms, 0);
        assert_eq!(cfg.ps.upstreams.len(), 1);

        let env: HashMap<&str, &str> = [("LINEAGE_LS_LISTEN", "0.0.0.0:9"), ("LINEAGE_PS_CACHE_TTL_MS", "5")].into();
        cfg.apply_env(|k| env.get(k).map(|v| v.to_string())).unwrap();
        assert_eq!(cfg.ls.listen, "0.0.0.0:9");
        assert_eq!(cfg.ps.cache_ttl_ms, 5);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(toml::from_str::<Config>("[ls]\nlisten_addr = \"x\"\n").is_err());
    }
}
